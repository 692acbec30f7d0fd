import csv
import io
import shutil

import numpy as np
import pytest

from gasca.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from gasca.cli import (METRICS_HEADER, ConfigError, ExperimentConfig, apply_seed_override, cmd_eval, cmd_grid,
                       cmd_run, main)
from gasca.data import DatasetManifest, write_idx_images
from gasca.model import GeneratorStack, identity_autoencoder, stack_generator
from gasca.trainer import evaluate

MANIFEST = "source=synthetic\nn=40\nimage_size=16\nmax_angle_deg=60\nseed=3\nval_fraction=0.2\n"
TINY = ("manifest=data.manifest\nregime=ganglw\nm_stages=1\nepochs_stage=3\nepochs_finetune_g=1\n"
        "epochs_finetune_d=1\nbatch_size=8\nseed=5\noutput_dir=out\n")


def write_run(tmp_path, config=TINY, manifest=MANIFEST):
    (tmp_path / "data.manifest").write_text(manifest)
    (tmp_path / "run.cfg").write_text(config)
    return tmp_path / "run.cfg"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def artifacts(out):
    return {name: (out / name).read_bytes() for name in ("metrics.csv", "model.ckpt", "grid.pgm")}


def test_single_stage_run_writes_one_row_per_epoch(tmp_path):
    assert cmd_run(write_run(tmp_path), environ={}) == 0
    rows = read_rows(tmp_path / "out" / "metrics.csv")
    assert rows[0] == METRICS_HEADER
    assert len(rows) - 1 == 3
    assert [r[4] for r in rows[1:]] == ["0", "1", "2"]
    assert {r[0] for r in rows[1:]} == {"ganglw"} and {r[1] for r in rows[1:]} == {"5"}
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["grid.pgm", "metrics.csv", "model.ckpt"]


@pytest.mark.parametrize("regime", ["ganglw", "glw", "joint"])
def test_each_regime_runs(tmp_path, regime):
    cfg = TINY.replace("regime=ganglw", f"regime={regime}").replace("m_stages=1", "m_stages=2")
    assert cmd_run(write_run(tmp_path, cfg), environ={}) == 0
    phases = {r[3] for r in read_rows(tmp_path / "out" / "metrics.csv")[1:]}
    expected = {"ganglw": {"stage", "finetune_g", "finetune_d"}, "glw": {"stage"}, "joint": {"joint"}}[regime]
    assert phases == expected


def test_unknown_key_exits_2_naming_the_key(tmp_path, capsys):
    assert cmd_run(write_run(tmp_path, TINY + "learning_rat=0.1\n"), environ={}) == 2
    err = capsys.readouterr().err
    assert "learning_rat" in err and err.count("\n") == 1
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("line", ["m_stages=0", "regime=adam", "batch_size=0", "lambda_adv=-1", "seed=-3",
                                  "finetune_g_mode=both", "epochs_stage=x", "channels=4"])
def test_invalid_values_exit_2(tmp_path, capsys, line):
    key = line.split("=")[0]
    cfg = "\n".join(l for l in TINY.splitlines() if not l.startswith(key + "=")) + f"\n{line}\n"
    if key == "channels":
        cfg = cfg.replace("m_stages=1", "m_stages=2")
    assert cmd_run(write_run(tmp_path, cfg), environ={}) == 2
    assert capsys.readouterr().err.startswith("gasca: error:")


def test_missing_manifest_exits_2(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text(TINY)
    assert cmd_run(tmp_path / "run.cfg", environ={}) == 2
    assert "data.manifest" in capsys.readouterr().err


def test_repeated_runs_are_byte_identical(tmp_path):
    cfg = write_run(tmp_path, TINY.replace("m_stages=1", "m_stages=2"))
    assert cmd_run(cfg, environ={}) == 0
    first = artifacts(tmp_path / "out")
    assert cmd_run(cfg, environ={}) == 0
    assert artifacts(tmp_path / "out") == first


def test_relocated_config_gives_identical_artifacts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    assert cmd_run(write_run(a), environ={}) == 0
    shutil.copytree(a, b, ignore=shutil.ignore_patterns("out"))
    assert cmd_run(b / "run.cfg", environ={}) == 0
    assert artifacts(a / "out") == artifacts(b / "out")


def test_seed_override_takes_precedence(tmp_path):
    cfg_path = write_run(tmp_path)
    assert cmd_run(cfg_path, environ={"GASCA_SEED": "99"}) == 0
    rows = read_rows(tmp_path / "out" / "metrics.csv")
    assert {r[1] for r in rows[1:]} == {"99"}
    overridden = artifacts(tmp_path / "out")
    assert cmd_run(write_run(tmp_path, TINY.replace("seed=5", "seed=99")), environ={}) == 0
    assert artifacts(tmp_path / "out")["metrics.csv"] == overridden["metrics.csv"]
    assert artifacts(tmp_path / "out")["model.ckpt"] == overridden["model.ckpt"]


def test_bad_seed_override(tmp_path):
    cfg = ExperimentConfig.load(write_run(tmp_path))
    with pytest.raises(ConfigError):
        apply_seed_override(cfg, {"GASCA_SEED": "abc"})
    with pytest.raises(ConfigError):
        apply_seed_override(cfg, {"GASCA_SEED": str(2**64)})
    assert apply_seed_override(cfg, {}).seed == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_abort_exits_3_without_metrics(tmp_path, capsys):
    cfg = TINY.replace("seed=5", "seed=1") + "lr=1e300\n"
    assert cmd_run(write_run(tmp_path, cfg), environ={}) == 3
    err = capsys.readouterr().err
    assert "aborted" in err and err.count("\n") == 1
    assert list((tmp_path / "out").iterdir()) == []


@pytest.fixture
def identity_setup(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, size=(10, 16, 16), dtype=np.uint8)
    write_idx_images(tmp_path / "digits.idx", images)
    (tmp_path / "m.manifest").write_text("source=idx\nimages_path=digits.idx\nseed=1\nval_fraction=0.5\n")
    G = stack_generator(GeneratorStack(), identity_autoencoder(1, (1, 16, 16)))
    save_checkpoint(tmp_path / "id.ckpt", Checkpoint(G))
    return tmp_path


def test_eval_identity_on_self_pairs_prints_zero(identity_setup):
    buf = io.StringIO()
    assert cmd_eval(identity_setup / "id.ckpt", identity_setup / "m.manifest", stdout=buf) == 0
    assert buf.getvalue() == "val_mse=0.0 input_mse=0.0\n"


def test_eval_matches_library_evaluate(tmp_path):
    assert cmd_run(write_run(tmp_path), environ={}) == 0
    buf = io.StringIO()
    assert cmd_eval(tmp_path / "out" / "model.ckpt", tmp_path / "data.manifest", stdout=buf) == 0
    line = buf.getvalue()
    assert line.count("\n") == 1 and line.startswith("val_mse=") and " input_mse=" in line
    fields = dict(part.split("=") for part in line.split())
    _, val = DatasetManifest.load(tmp_path / "data.manifest").build_split()
    expected = evaluate(load_checkpoint(tmp_path / "out" / "model.ckpt").generator, val)
    assert abs(float(fields["val_mse"]) - expected) <= 1e-12 * expected
    assert float(fields["input_mse"]) == pytest.approx(np.mean((val.inputs - val.targets) ** 2), rel=1e-12)


def test_eval_rejects_bad_checkpoint(identity_setup, capsys):
    (identity_setup / "junk.ckpt").write_bytes(b"nope")
    assert cmd_eval(identity_setup / "junk.ckpt", identity_setup / "m.manifest") == 2
    assert cmd_eval(identity_setup / "absent.ckpt", identity_setup / "m.manifest") == 2
    assert capsys.readouterr().out == ""


def test_grid_layout_and_header(identity_setup):
    out = identity_setup / "grid.pgm"
    assert cmd_grid(identity_setup / "id.ckpt", identity_setup / "m.manifest", out, 5) == 0
    data = out.read_bytes()
    header = b"P5\n80 32\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 80 * 32
    pixels = np.frombuffer(data[len(header):], dtype=np.uint8).reshape(32, 80)
    np.testing.assert_array_equal(pixels[:16], pixels[16:])


def test_grid_pixels_round_inputs(identity_setup):
    out = identity_setup / "grid.pgm"
    assert cmd_grid(identity_setup / "id.ckpt", identity_setup / "m.manifest", out, 1) == 0
    _, val = DatasetManifest.load(identity_setup / "m.manifest").build_split()
    pixels = np.frombuffer(out.read_bytes()[len(b"P5\n16 32\n255\n"):], dtype=np.uint8).reshape(32, 16)
    np.testing.assert_array_equal(pixels[:16], np.round(val.inputs[0, 0] * 255).astype(np.uint8))


def test_grid_rejects_too_many_rows(identity_setup, capsys):
    out = identity_setup / "grid.pgm"
    assert cmd_grid(identity_setup / "id.ckpt", identity_setup / "m.manifest", out, 50) == 2
    assert not out.exists()
    assert "rows" in capsys.readouterr().err


def test_main_dispatch(identity_setup, capsys):
    assert main(["eval", str(identity_setup / "id.ckpt"), str(identity_setup / "m.manifest")]) == 0
    assert capsys.readouterr().out == "val_mse=0.0 input_mse=0.0\n"
    out = identity_setup / "g.pgm"
    assert main(["grid", str(identity_setup / "id.ckpt"), str(identity_setup / "m.manifest"), str(out),
                 "--rows", "2"]) == 0
    assert out.read_bytes().startswith(b"P5\n32 32\n255\n")
