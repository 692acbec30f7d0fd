"""Acceptance criteria, one test each.

Every test appends a single ``AC-n PASS|FAIL ...`` line to the session log,
which is printed in the terminal summary, and then asserts the verdict.
"""
import statistics
import time

import numpy as np
import pytest

from gasca.cli import cmd_run, render_grid_pgm
from gasca.core import (Parameter, SeededRng, activation_backward, activation_forward, conv2d_backward,
                        conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, dense_backward,
                        dense_forward, mse_loss, sigmoid, sigmoid_backward)
from gasca.data import split, synth_pose_dataset
from gasca.model import StageFactory, make_autoencoder, make_discriminator
from gasca.objectives import (LossWeights, combined_generator_loss, discriminator_loss,
                              generator_adversarial_loss)
from gasca.optim import finite_diff_check
from gasca.trainer import (StageConfig, ganglw_generator_updates, ganglw_train, glw_baseline,
                           joint_train_baseline, train_shallow_pair)
from oracles import naive_conv2d, naive_conv_transpose2d, rel_err
from test_trainer import TRACE_GRAMMAR, same_bytes, snapshot

CASES = 20
FD_TOL = 1e-4


def verdict(log, name, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail} [{elapsed:.1f}s of {budget:.0f}s]"
    log.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# AC-1: finite differences for every primitive
# ---------------------------------------------------------------------------

def _conv_case(r):
    k = int(r.integers(1, 4))
    s, p = int(r.integers(1, 3)), int(r.integers(0, k))
    x = r.normal(size=(int(r.integers(1, 3)), int(r.integers(1, 4)), int(r.integers(k, 8)), int(r.integers(k, 8))))
    w = r.normal(size=(int(r.integers(1, 4)), x.shape[1], k, k))
    return x, w, r.normal(size=w.shape[0]), s, p


def _convt_case(r):
    while True:
        k = int(r.integers(1, 4))
        s, p = int(r.integers(1, 3)), int(r.integers(0, k))
        h, wd = int(r.integers(1, 6)), int(r.integers(1, 6))
        if (h - 1) * s - 2 * p + k > 0 and (wd - 1) * s - 2 * p + k > 0:
            break
    x = r.normal(size=(int(r.integers(1, 3)), int(r.integers(1, 4)), h, wd))
    w = r.normal(size=(x.shape[1], int(r.integers(1, 4)), k, k))
    return x, w, r.normal(size=w.shape[1]), s, p


def _probe_conv(r, transpose):
    x, w, b, s, p = (_convt_case if transpose else _conv_case)(r)
    fwd, bwd = (conv_transpose2d_forward, conv_transpose2d_backward) if transpose else (conv2d_forward, conv2d_backward)
    px, pw, pb = Parameter(x), Parameter(w), Parameter(b)
    proj = r.normal(size=fwd(x, w, b, s, p).shape)

    def f():
        out = fwd(px.value, pw.value, pb.value, s, p)
        gx, gw, gb = bwd(px.value, pw.value, s, p, proj)
        px.grad += gx
        pw.grad += gw
        pb.grad += gb
        return float(np.sum(out * proj))
    return finite_diff_check(f, [px, pw, pb])


def _probe_dense(r):
    x = r.normal(size=(int(r.integers(1, 4)), int(r.integers(1, 3)), int(r.integers(1, 4)), int(r.integers(1, 4))))
    d = int(np.prod(x.shape[1:]))
    n_out = int(r.integers(1, 5))
    px, pw, pb = Parameter(x), Parameter(r.normal(size=(n_out, d))), Parameter(r.normal(size=n_out))
    proj = r.normal(size=(x.shape[0], pw.shape[0]))

    def f():
        out = dense_forward(px.value, pw.value, pb.value)
        gx, gw, gb = dense_backward(px.value, pw.value, proj)
        px.grad += gx
        pw.grad += gw
        pb.grad += gb
        return float(np.sum(out * proj))
    return finite_diff_check(f, [px, pw, pb])


def _random_shape(r):
    return tuple(int(v) for v in r.integers(1, 5, size=int(r.integers(1, 5))))


def _probe_leaky(r):
    shape = _random_shape(r)
    # keep samples clear of the kink so central differences never straddle it
    x = r.choice([-1.0, 1.0], size=shape) * r.uniform(0.01, 2.0, size=shape)
    alpha = float(r.uniform(0.0, 0.5))
    px, proj = Parameter(x), r.normal(size=shape)

    def f():
        px.grad += activation_backward(px.value, "leaky_relu", proj, alpha)
        return float(np.sum(activation_forward(px.value, "leaky_relu", alpha) * proj))
    return finite_diff_check(f, [px])


def _probe_sigmoid(r):
    shape = _random_shape(r)
    px, proj = Parameter(r.uniform(-6, 6, size=shape)), r.normal(size=shape)

    def f():
        y = sigmoid(px.value)
        px.grad += sigmoid_backward(y, proj)
        return float(np.sum(y * proj))
    return finite_diff_check(f, [px])


def _probe_mse(r):
    shape = _random_shape(r)
    py, t = Parameter(r.normal(size=shape)), r.normal(size=shape)

    def f():
        loss, g = mse_loss(py.value, t)
        py.grad += g
        return loss
    return finite_diff_check(f, [py])


def _probs(r):
    return r.uniform(0.02, 0.98, size=(int(r.integers(1, 17)), 1))


def _probe_d_loss(r):
    pr = Parameter(_probs(r))
    pf = Parameter(r.uniform(0.02, 0.98, size=pr.shape))

    def f():
        b = discriminator_loss(pr.value, pf.value)
        pr.grad += b.grads["d_real"]
        pf.grad += b.grads["d_fake"]
        return b.value
    return finite_diff_check(f, [pr, pf])


def _probe_g_loss(r, non_saturating):
    pf = Parameter(_probs(r))

    def f():
        b = generator_adversarial_loss(pf.value, non_saturating)
        pf.grad += b.grads["d_fake"]
        return b.value
    return finite_diff_check(f, [pf])


def _probe_combined(r):
    m = int(r.integers(1, 6))
    py, t = Parameter(r.uniform(size=(m, 1, 3, 3))), r.uniform(size=(m, 1, 3, 3))
    pf = Parameter(r.uniform(0.02, 0.98, size=(m, 1)))
    w = LossWeights(float(r.uniform(0.1, 2.0)), float(r.uniform(0.0, 2.0)))

    def f():
        b = combined_generator_loss(py.value, t, pf.value, w)
        py.grad += b.grads["y"]
        pf.grad += b.grads["d_fake"]
        return b.value
    return finite_diff_check(f, [py, pf])


def _probe_stage(r):
    c, size = int(r.integers(1, 3)), int(r.choice([4, 6, 8]))
    k = int(r.integers(1, 3))
    g = make_autoencoder(k, (c, size, size), int(r.integers(1, 4 * c + 1)), SeededRng(int(r.integers(2**32))))
    x, t = r.uniform(size=(2, c, size, size)), r.uniform(size=(2, c, size, size))

    def f():
        loss, grad = mse_loss(g.forward(x), t)
        g.backward(grad)
        return loss
    return finite_diff_check(f, g.parameters())


def _probe_discriminator(r):
    c, size = int(r.integers(1, 3)), int(r.choice([4, 6, 8]))
    d = make_discriminator(1, (c, size, size), int(r.integers(1, 4)), SeededRng(int(r.integers(2**32))))
    m = int(r.integers(1, 4))
    real, fake = r.uniform(size=(m, c, size, size)), r.uniform(size=(m, c, size, size))

    def f():
        p = d.forward(np.concatenate([real, fake]))
        b = discriminator_loss(p[:m], p[m:])
        d.backward(np.concatenate([b.grads["d_real"], b.grads["d_fake"]]))
        return b.value
    return finite_diff_check(f, d.parameters())


PRIMITIVES = {
    "conv2d": lambda r: _probe_conv(r, False),
    "conv_transpose2d": lambda r: _probe_conv(r, True),
    "dense": _probe_dense,
    "leaky_relu": _probe_leaky,
    "sigmoid": _probe_sigmoid,
    "mse": _probe_mse,
    "discriminator_loss": _probe_d_loss,
    "generator_loss": lambda r: _probe_g_loss(r, False),
    "generator_loss_non_saturating": lambda r: _probe_g_loss(r, True),
    "combined_generator_loss": _probe_combined,
    "autoencoder_stage": _probe_stage,
    "discriminator_stage": _probe_discriminator,
}


def test_ac1_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    worst = {}
    for i, (name, probe) in enumerate(PRIMITIVES.items()):
        r = np.random.default_rng(1000 + i)
        worst[name] = max(probe(r) for _ in range(CASES))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < FD_TOL}
    detail = (f"{len(PRIMITIVES)} primitives x {CASES} shapes, worst rel err {max(worst.values()):.2e}"
              + (f", over tolerance: {bad}" if bad else ""))
    verdict(acceptance_log, "AC-1", not bad, detail, elapsed, 30)


# ---------------------------------------------------------------------------
# AC-2: oracle equivalence and adjointness
# ---------------------------------------------------------------------------

def _adjoint_case(r):
    while True:
        k = int(r.integers(1, 4))
        s, p = int(r.integers(1, 3)), int(r.integers(0, k))
        h, wd = ((int(r.integers(1, 6)) - 1) * s + k - 2 * p for _ in range(2))
        if h >= 1 and wd >= 1:
            break
    x = r.normal(size=(int(r.integers(1, 3)), int(r.integers(1, 4)), h, wd))
    return x, r.normal(size=(int(r.integers(1, 4)), x.shape[1], k, k)), s, p


def test_ac2_oracle_equivalence(acceptance_log):
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    conv_err = convt_err = adj_err = 0.0
    n_cases = 100
    for _ in range(n_cases):
        x, w, b, s, p = _conv_case(r)
        conv_err = max(conv_err, rel_err(conv2d_forward(x, w, b, s, p), naive_conv2d(x, w, b, s, p)))
        x, w, b, s, p = _convt_case(r)
        convt_err = max(convt_err, rel_err(conv_transpose2d_forward(x, w, b, s, p), naive_conv_transpose2d(x, w, b, s, p)))
        # <conv(x), y> == <x, conv_transpose(y)> with shared weights and zero bias, on
        # shapes where the strided windows tile the padded input exactly
        x, w, s, p = _adjoint_case(r)
        out = conv2d_forward(x, w, np.zeros(w.shape[0]), s, p)
        y = r.normal(size=out.shape)
        back = conv_transpose2d_forward(y, w, np.zeros(w.shape[1]), s, p)
        lhs, rhs = float(np.sum(out * y)), float(np.sum(x * back))
        adj_err = max(adj_err, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    elapsed = time.perf_counter() - t0
    ok = conv_err <= 1e-12 and convt_err <= 1e-12 and adj_err <= 1e-12
    detail = (f"{n_cases} cases each: conv2d {conv_err:.1e}, conv_transpose2d {convt_err:.1e}, "
              f"adjoint {adj_err:.1e} (tol 1e-12)")
    verdict(acceptance_log, "AC-2", ok, detail, elapsed, 30)


# ---------------------------------------------------------------------------
# AC-3: layer-wise loop conformance
# ---------------------------------------------------------------------------

def test_ac3_algorithm_conformance(acceptance_log, tiny_pairs, factory, tiny_cfg):
    t0 = time.perf_counter()
    train, val = tiny_pairs
    problems = []
    expected_two = ["stage_train 1", "stack_g 1", "stack_d 1", "encode_dataset 2", "stage_train 2", "stack_g 2",
                    "stack_d 2", "finetune_g", "reconstruct_trainset", "finetune_d"]
    for m in (1, 2, 3):
        _, _, _, trace = ganglw_train(m, factory, train, val, tiny_cfg, SeededRng(m))
        if not TRACE_GRAMMAR.fullmatch("|".join(trace)) or trace.count("stage_train " + str(m)) != 1:
            problems.append(f"trace m={m}: {trace}")
        if m == 2 and trace != expected_two:
            problems.append(f"m=2 trace differs: {trace}")

    G, D, report, _ = ganglw_train(1, factory, train, val, tiny_cfg, SeededRng(31))
    rng = SeededRng(31)
    G1, D1 = factory.generator(1, train.sample_shape, rng), factory.discriminator(1, train.sample_shape, rng)
    _, _, ref = train_shallow_pair(G1, D1, train, val, tiny_cfg, rng, stage=1)
    if not (report.records == ref.records and same_bytes(snapshot(G.parameters()), snapshot(G1.parameters()))
            and same_bytes(snapshot(D.parameters()), snapshot(D1.parameters()))):
        problems.append("m=1 differs from a bare stage run")

    cfg0 = StageConfig(epochs_stage=2, epochs_finetune_g=0, epochs_finetune_d=0, batch_size=8)
    a = ganglw_train(3, factory, train, val, cfg0, SeededRng(8))
    b = glw_baseline(3, factory, train, val, cfg0, SeededRng(8))
    if not (a[2].records == b[2].records and same_bytes(snapshot(a[0].parameters()), snapshot(b[0].parameters()))
            and same_bytes(snapshot(a[1].parameters()), snapshot(b[1].parameters()))):
        problems.append("zero fine-tune epochs: ganglw and glw differ")
    elapsed = time.perf_counter() - t0
    detail = "traces m=1,2,3 conform; m=1 bit-identical; glw equivalence bit-identical" if not problems \
        else "; ".join(problems)
    verdict(acceptance_log, "AC-3", not problems, detail, elapsed, 120)


# ---------------------------------------------------------------------------
# AC-4: byte-identical CLI artifacts
# ---------------------------------------------------------------------------

def test_ac4_cli_determinism(acceptance_log, tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "data.manifest").write_text("source=synthetic\nn=40\nimage_size=16\nmax_angle_deg=60\nseed=3\n")
    differing = []
    for regime in ("ganglw", "glw", "joint"):
        cfg = tmp_path / f"{regime}.cfg"
        cfg.write_text(f"manifest=data.manifest\nregime={regime}\nm_stages=2\nepochs_stage=2\n"
                       f"epochs_finetune_g=2\nepochs_finetune_d=1\nbatch_size=8\nseed=7\noutput_dir=out_{regime}\n")
        outputs = []
        for _ in range(2):
            code = cmd_run(cfg, environ={})
            out = tmp_path / f"out_{regime}"
            outputs.append((code, {n: (out / n).read_bytes() for n in ("metrics.csv", "model.ckpt", "grid.pgm")}))
        if outputs[0][0] != 0 or outputs[0] != outputs[1]:
            differing.append(regime)
    elapsed = time.perf_counter() - t0
    detail = ("metrics.csv, model.ckpt, grid.pgm byte-identical across reruns for ganglw, glw, joint"
              if not differing else f"artifacts differ for {differing}")
    verdict(acceptance_log, "AC-4", not differing, detail, elapsed, 120)


# ---------------------------------------------------------------------------
# AC-5 .. AC-8: the desk-scale pose experiment, run once per module
# ---------------------------------------------------------------------------

SEEDS = (1, 2, 3)
EXPERIMENT_CFG = StageConfig(epochs_stage=40, epochs_finetune_g=40, epochs_finetune_d=3)


def per_sample_mse(a, b):
    return np.mean((a - b) ** 2, axis=(1, 2, 3))


@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    ds = synth_pose_dataset(512, 16, 60.0, SeededRng(0))
    train, val, _ = split(ds, 0.2, SeededRng(1))
    factory = StageFactory()
    runs = []
    for seed in SEEDS:
        G, D, rep, _ = ganglw_train(2, factory, train, val, EXPERIMENT_CFG, SeededRng(seed))
        _, _, rep_glw, _ = glw_baseline(2, factory, train, val, EXPERIMENT_CFG, SeededRng(seed))
        _, _, rep_joint = joint_train_baseline(2, factory, train, val, EXPERIMENT_CFG, SeededRng(seed))
        runs.append({"seed": seed, "G": G, "D": D, "ganglw": rep, "glw": rep_glw, "joint": rep_joint})
    return {"train": train, "val": val, "runs": runs, "elapsed": time.perf_counter() - t0}


def _medians(experiment, regime):
    values = [run[regime].final_val_mse for run in experiment["runs"]]
    return statistics.median(values), values


def test_ac5_ganglw_not_worse_than_joint(acceptance_log, experiment):
    n_train = len(experiment["train"])
    budgets_match = all(run["ganglw"].g_updates == run["joint"].g_updates
                        == ganglw_generator_updates(2, EXPERIMENT_CFG, n_train) for run in experiment["runs"])
    med_g, vals_g = _medians(experiment, "ganglw")
    med_j, vals_j = _medians(experiment, "joint")
    detail = (f"median val MSE ganglw {med_g:.5f} vs joint {med_j:.5f} "
              f"(per seed {[round(v, 5) for v in vals_g]} vs {[round(v, 5) for v in vals_j]}), "
              f"equal budgets {budgets_match} ({experiment['runs'][0]['joint'].g_updates} updates)")
    verdict(acceptance_log, "AC-5", budgets_match and med_g <= med_j, detail, experiment["elapsed"], 600)


def test_ac6_ganglw_not_worse_than_glw(acceptance_log, experiment):
    med_g, vals_g = _medians(experiment, "ganglw")
    med_l, vals_l = _medians(experiment, "glw")
    detail = (f"median val MSE ganglw {med_g:.5f} vs glw {med_l:.5f} "
              f"(per seed {[round(v, 5) for v in vals_g]} vs {[round(v, 5) for v in vals_l]})")
    verdict(acceptance_log, "AC-6", med_g <= med_l, detail, experiment["elapsed"], 600)


def test_ac7_pose_normalisation(acceptance_log, experiment, tmp_path_factory):
    t0 = time.perf_counter()
    val = experiment["val"]
    baseline = float(np.median(per_sample_mse(val.inputs, val.targets)))
    recon = [float(np.median(per_sample_mse(run["G"].reconstruct(val.inputs), val.targets)))
             for run in experiment["runs"]]
    pgm_path = tmp_path_factory.mktemp("ac7") / "grid.pgm"
    payload = render_grid_pgm(experiment["runs"][0]["G"], val, 5)
    pgm_path.write_bytes(payload)
    pgm_ok = payload.startswith(b"P5\n80 32\n255\n") and len(payload) == len(b"P5\n80 32\n255\n") + 80 * 32
    ok = all(v < baseline for v in recon) and pgm_ok
    detail = (f"median per-sample MSE reconstruction {[round(v, 5) for v in recon]} vs input {baseline:.5f}; "
              f"grid written to {pgm_path}")
    verdict(acceptance_log, "AC-7", ok, detail, time.perf_counter() - t0, 600)


def test_ac8_discriminator_sanity(acceptance_log, experiment):
    t0 = time.perf_counter()
    train = experiment["train"]
    accs, in_range = [], True
    for run in experiment["runs"]:
        accs.append(run["ganglw"].accuracy)
        p = run["D"].forward(np.concatenate([train.targets, run["G"].reconstruct(train.inputs)]))
        in_range &= bool(np.all((p > 0.0) & (p < 1.0)))
    ok = all(a >= 0.5 for a in accs) and in_range
    detail = f"accuracy on its own training inputs {[round(a, 4) for a in accs]}, outputs in (0,1): {in_range}"
    verdict(acceptance_log, "AC-8", ok, detail, time.perf_counter() - t0, 60)
