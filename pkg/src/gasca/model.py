"""Shallow autoencoders and discriminators and their stacked forms.

A generator stack of depth m applies its blocks in mirrored nesting,
``xi1, ..., xim, deltam, ..., delta1``: the newest stage sits innermost.
A discriminator stack chains feature blocks ``phi1, ..., phiK`` and keeps
only the newest head ``hK``.

Every ``forward``-style call takes an optional ``trace`` list which receives
the label of each block as it runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import Block, LayerSpec, Parameter, SeededRng, ShapeError, Tensor


def _check_input(x: Tensor, shape: tuple, what: str) -> None:
    if x.ndim != len(shape) + 1 or tuple(x.shape[1:]) != tuple(shape):
        raise ShapeError(f"{what} expects inputs of shape (N, {', '.join(map(str, shape))}), got {x.shape}")


class ShallowAutoencoder:
    """One encoder block and its mirrored decoder block (stage ``k``)."""

    def __init__(self, k: int, input_shape: Sequence[int], encoder: Block, decoder: Block,
                 require_compression: bool = True):
        self.k = k
        self.input_shape = tuple(input_shape)
        self.encoder = encoder
        self.decoder = decoder
        self.code_shape = encoder.output_shape(self.input_shape)
        out = decoder.output_shape(self.code_shape)
        if out != self.input_shape:
            raise ShapeError(f"stage {k}: decoder maps code {self.code_shape} to {out}, expected {self.input_shape}")
        if require_compression and math.prod(self.code_shape) > math.prod(self.input_shape):
            raise ShapeError(f"stage {k}: code {self.code_shape} is larger than input {self.input_shape}")

    def encode(self, x, trace=None):
        _check_input(x, self.input_shape, f"stage {self.k} encoder")
        return self.encoder.forward(x, trace)

    def forward(self, x, trace=None):
        return self.decoder.forward(self.encode(x, trace), trace)

    def backward(self, grad):
        return self.encoder.backward(self.decoder.backward(grad))

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def to_config(self) -> dict:
        return {"k": self.k, "input_shape": list(self.input_shape),
                "encoder": self.encoder.to_config(), "decoder": self.decoder.to_config()}

    @classmethod
    def from_config(cls, cfg: dict) -> "ShallowAutoencoder":
        return cls(cfg["k"], cfg["input_shape"], Block.from_config(cfg["encoder"]),
                   Block.from_config(cfg["decoder"]), require_compression=False)


class ShallowDiscriminator:
    """Feature block ``phi_k`` followed by a dense+sigmoid head ``h_k``."""

    def __init__(self, k: int, input_shape: Sequence[int], features: Block, head: Block):
        self.k = k
        self.input_shape = tuple(input_shape)
        self.features = features
        self.head = head
        self.feature_shape = features.output_shape(self.input_shape)
        if head.output_shape(self.feature_shape) != (1,):
            raise ShapeError(f"discriminator {k}: head must produce one probability per item")

    def forward(self, x, trace=None):
        _check_input(x, self.input_shape, f"discriminator {self.k}")
        return self.head.forward(self.features.forward(x, trace), trace)

    def backward(self, grad):
        return self.features.backward(self.head.backward(grad))

    def parameters(self) -> list[Parameter]:
        return self.features.parameters() + self.head.parameters()


class GeneratorStack:
    def __init__(self, stages: Sequence[ShallowAutoencoder] = ()):
        self.stages = tuple(stages)
        for prev, nxt in zip(self.stages, self.stages[1:]):
            if nxt.input_shape != prev.code_shape:
                raise ShapeError(f"stage {nxt.k} expects {nxt.input_shape} but stage {prev.k} emits {prev.code_shape}")

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def input_shape(self) -> Optional[tuple]:
        return self.stages[0].input_shape if self.stages else None

    @property
    def code_shape(self) -> Optional[tuple]:
        return self.stages[-1].code_shape if self.stages else None

    def _require_stages(self):
        if not self.stages:
            raise ValueError("generator stack is empty")

    def encode(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        self._require_stages()
        for stage in self.stages:
            x = stage.encode(x, trace)
        return x

    def decode(self, z: Tensor, trace: Optional[list] = None) -> Tensor:
        self._require_stages()
        for stage in reversed(self.stages):
            z = stage.decoder.forward(z, trace)
        return z

    def reconstruct(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        return self.decode(self.encode(x, trace), trace)

    forward = reconstruct

    def backward(self, grad: Tensor) -> Tensor:
        for stage in self.stages:
            grad = stage.decoder.backward(grad)
        for stage in reversed(self.stages):
            grad = stage.encoder.backward(grad)
        return grad

    def parameters(self) -> list[Parameter]:
        return [p for s in self.stages for p in s.parameters()]

    def to_config(self) -> dict:
        return {"stages": [s.to_config() for s in self.stages]}

    @classmethod
    def from_config(cls, cfg: dict) -> "GeneratorStack":
        return cls([ShallowAutoencoder.from_config(s) for s in cfg["stages"]])


class DiscriminatorStack:
    def __init__(self, blocks: Sequence[Block] = (), head: Optional[Block] = None,
                 input_shape: Optional[Sequence[int]] = None):
        self.blocks = tuple(blocks)
        self.head = head
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        shape = self.input_shape
        if shape is not None:
            for block in self.blocks:
                shape = block.output_shape(shape)
            if head is not None and head.output_shape(shape) != (1,):
                raise ShapeError("discriminator head must produce one probability per item")
        self.feature_shape = shape

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def discriminate(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        if self.head is None:
            raise ValueError("discriminator stack is empty")
        _check_input(x, self.input_shape, "discriminator stack")
        for block in self.blocks:
            x = block.forward(x, trace)
        return self.head.forward(x, trace)

    forward = discriminate

    def backward(self, grad: Tensor) -> Tensor:
        grad = self.head.backward(grad)
        for block in reversed(self.blocks):
            grad = block.backward(grad)
        return grad

    def parameters(self) -> list[Parameter]:
        params = [p for b in self.blocks for p in b.parameters()]
        return params + (self.head.parameters() if self.head is not None else [])

    def to_config(self) -> dict:
        return {"input_shape": list(self.input_shape) if self.input_shape else None,
                "blocks": [b.to_config() for b in self.blocks],
                "head": self.head.to_config() if self.head is not None else None}

    @classmethod
    def from_config(cls, cfg: dict) -> "DiscriminatorStack":
        head = Block.from_config(cfg["head"]) if cfg["head"] is not None else None
        return cls([Block.from_config(b) for b in cfg["blocks"]], head, cfg["input_shape"])


def stack_generator(G: GeneratorStack, G_k: ShallowAutoencoder) -> GeneratorStack:
    """Nest ``G_k`` innermost. Existing stages are shared, not copied or touched."""
    if G.stages and G_k.input_shape != G.code_shape:
        raise ShapeError(f"stage {G_k.k} expects input {G_k.input_shape} but the stack's code is {G.code_shape}")
    return GeneratorStack(G.stages + (G_k,))


def stack_discriminator(D: DiscriminatorStack, D_k: ShallowDiscriminator) -> DiscriminatorStack:
    """Append ``phi_k`` to the feature chain and replace the head with ``h_k``."""
    if D.blocks and D_k.input_shape != D.feature_shape:
        raise ShapeError(f"discriminator {D_k.k} expects input {D_k.input_shape} but the stack's features are {D.feature_shape}")
    input_shape = D.input_shape if D.blocks else D_k.input_shape
    return DiscriminatorStack(D.blocks + (D_k.features,), D_k.head, input_shape)


def encode(G: GeneratorStack, x: Tensor, trace=None) -> Tensor:
    return G.encode(x, trace)


def reconstruct(G: GeneratorStack, x: Tensor, trace=None) -> Tensor:
    return G.reconstruct(x, trace)


def discriminate(D: DiscriminatorStack, x: Tensor, trace=None) -> Tensor:
    return D.discriminate(x, trace)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def make_autoencoder(k: int, input_shape: Sequence[int], code_channels: int, rng: Optional[SeededRng] = None,
                     kernel_size: int = 4, stride: int = 2, padding: int = 1, alpha: float = 0.2,
                     output_activation: Optional[str] = None, require_compression: bool = True) -> ShallowAutoencoder:
    """Conv + leaky_relu encoder, conv_transpose + activation decoder.

    The decoder of stage 1 ends in a sigmoid (pixels live in [0, 1]); deeper
    stages rebuild leaky_relu codes and default to leaky_relu.
    """
    c = input_shape[0]
    if output_activation is None:
        output_activation = "sigmoid" if k == 1 else "leaky_relu"
    enc = [LayerSpec("conv", c, code_channels, kernel_size, stride, padding),
           LayerSpec("leaky_relu", alpha=alpha)]
    dec = [LayerSpec("conv_transpose", code_channels, c, kernel_size, stride, padding),
           LayerSpec(output_activation, alpha=alpha)]
    return ShallowAutoencoder(k, input_shape, Block(f"xi{k}", enc, rng), Block(f"delta{k}", dec, rng),
                              require_compression)


def make_discriminator(k: int, input_shape: Sequence[int], channels: int, rng: Optional[SeededRng] = None,
                       kernel_size: int = 4, stride: int = 2, padding: int = 1,
                       alpha: float = 0.2) -> ShallowDiscriminator:
    c = input_shape[0]
    feats = Block(f"phi{k}", [LayerSpec("conv", c, channels, kernel_size, stride, padding),
                              LayerSpec("leaky_relu", alpha=alpha)], rng)
    n_features = math.prod(feats.output_shape(tuple(input_shape)))
    head = Block(f"h{k}", [LayerSpec("dense", n_features, 1), LayerSpec("sigmoid")], rng)
    return ShallowDiscriminator(k, input_shape, feats, head)


def identity_autoencoder(k: int, input_shape: Sequence[int]) -> ShallowAutoencoder:
    """1x1 identity conv down and up with no activation; reconstruct(x) == x."""
    c = input_shape[0]
    enc = Block(f"xi{k}", [LayerSpec("conv", c, c, 1, 1, 0)])
    dec = Block(f"delta{k}", [LayerSpec("conv_transpose", c, c, 1, 1, 0)])
    for layer in (enc.layers[0], dec.layers[0]):
        for i in range(c):
            layer.weight.value[i, i, 0, 0] = 1.0
    return ShallowAutoencoder(k, input_shape, enc, dec)


@dataclass(frozen=True)
class StageFactory:
    """Builds stage ``k`` generator/discriminator pairs for a given input shape.

    ``channels[k-1]`` is the channel count of stage ``k``'s code; the
    discriminator feature block mirrors it so ``phi_k`` consumes exactly what
    ``phi_{k-1}`` emits.
    """
    channels: tuple = (4, 8)
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    alpha: float = 0.2

    def _channels(self, k: int) -> int:
        if not 1 <= k <= len(self.channels):
            raise ValueError(f"no channel count configured for stage {k} (channels={self.channels})")
        return self.channels[k - 1]

    def generator(self, k: int, input_shape, rng: SeededRng) -> ShallowAutoencoder:
        return make_autoencoder(k, input_shape, self._channels(k), rng, self.kernel_size,
                                self.stride, self.padding, self.alpha)

    def discriminator(self, k: int, input_shape, rng: SeededRng) -> ShallowDiscriminator:
        return make_discriminator(k, input_shape, self._channels(k), rng, self.kernel_size,
                                  self.stride, self.padding, self.alpha)
