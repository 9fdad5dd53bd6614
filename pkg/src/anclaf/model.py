"""Generator, Discriminator, and Combiner assembly in three variants.

The frame variant maps a single image through G -> D -> ZQ -> C.  The
sequence variants run the Combiner's LSTM over per-frame conditioned
latent features; the attention variant additionally prepends a context
vector summarizing previous combined LSTM states to each LSTM input.

Forwards accept single vectors or [dim, B] batches throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import attention as At
from . import layers as L
from . import tensor as T
from .data import distort as distort_image
from .data import quadrant_of_pair
from .errors import ShapeError
from .metrics import AffectLabel
from .tensor import Tensor

VARIANTS = ("frame", "sequence", "sequence_attention")
CURRICULUM_DEFAULT = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class ArchConfig:
    """Network dimensions and conditioning switches."""

    image_dim: int = 256
    g_dims: Tuple[int, ...] = (256, 128, 64)
    d_dims: Tuple[int, ...] = (256, 64, 32)
    c_frame_hidden: int = 32
    hidden_size: int = 32
    attention_mode: str = "concat"
    eq7_divide_by_n: bool = True
    hard_quadrant_onehot: bool = False

    @property
    def latent_dim(self) -> int:
        return self.g_dims[-1]

    @property
    def zq_dim(self) -> int:
        return self.latent_dim + 4

    def to_dict(self) -> dict:
        return {
            "image_dim": self.image_dim,
            "g_dims": list(self.g_dims),
            "d_dims": list(self.d_dims),
            "c_frame_hidden": self.c_frame_hidden,
            "hidden_size": self.hidden_size,
            "attention_mode": self.attention_mode,
            "eq7_divide_by_n": self.eq7_divide_by_n,
            "hard_quadrant_onehot": self.hard_quadrant_onehot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["g_dims"] = tuple(d["g_dims"])
        d["d_dims"] = tuple(d["d_dims"])
        return cls(**d)


@dataclass
class LatentFeature:
    """Conditioned per-frame feature: latent z joined with quadrant probs."""

    z: Tensor
    q: Tensor
    zq: Tensor


def quadrant_of(label: AffectLabel) -> int:
    """Circumplex quadrant; boundaries go to the nonnegative side."""
    if not (np.isfinite(label.valence) and np.isfinite(label.arousal)):
        raise ShapeError("non-finite label")
    return quadrant_of_pair(label.valence, label.arousal)


class GeneratorNet:
    """Denoising autoencoder; the encoder output doubles as the latent feature."""

    def __init__(self, encoder: L.EncoderStack, decoder: L.DecoderStack):
        if encoder.latent_dim != decoder.in_dim or encoder.in_dim != decoder.out_dim:
            raise ShapeError("generator encoder/decoder dims do not mirror")
        self.encoder = encoder
        self.decoder = decoder

    def encode(self, image: Tensor) -> Tensor:
        return self.encoder.forward(image)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder.forward(z)

    def parameters(self):
        return ([(f"encoder.{n}", p) for n, p in self.encoder.parameters()]
                + [(f"decoder.{n}", p) for n, p in self.decoder.parameters()])


def generator_forward(g: GeneratorNet, image: Tensor, distort: bool = False,
                      rng: Optional[np.random.Generator] = None):
    """(reconstruction, z); with ``distort`` the input is corrupted first."""
    if distort:
        if rng is None:
            raise ShapeError("distortion requires an rng")
        arr = image.array
        if arr.ndim == 1:
            corrupted = distort_image(arr, rng).reshape(arr.shape)
        else:
            corrupted = np.stack(
                [distort_image(arr[:, j], rng).reshape(-1) for j in range(arr.shape[1])],
                axis=1)
        image = Tensor(corrupted)
    z = g.encode(image)
    return g.decode(z), z


class DiscriminatorNet:
    """Shared encoder with a real/fake sigmoid head and a 4-way quadrant head."""

    def __init__(self, encoder: L.EncoderStack, head_realfake: L.AffineLayer,
                 head_quadrant: L.AffineLayer):
        if head_realfake.out_dim != 1 or head_quadrant.out_dim != 4:
            raise ShapeError("discriminator heads must emit 1 and 4 values")
        self.encoder = encoder
        self.head_realfake = head_realfake
        self.head_quadrant = head_quadrant

    def parameters(self):
        out = [(f"encoder.{n}", p) for n, p in self.encoder.parameters()]
        out += [(f"head_realfake.{n}", p) for n, p in self.head_realfake.parameters()]
        out += [(f"head_quadrant.{n}", p) for n, p in self.head_quadrant.parameters()]
        return out


@dataclass
class DiscOut:
    p_real: Tensor    # [1] or [1, B], strictly in (0, 1)
    q_logits: Tensor  # [4] or [4, B]
    q_probs: Tensor   # softmax over the 4 classes


def discriminator_forward(d: DiscriminatorNet, image: Tensor) -> DiscOut:
    feats = d.encoder.forward(image)
    p_real = d.head_realfake.forward(feats)
    q_logits = d.head_quadrant.forward(feats)
    if q_logits.ndim == 1:
        q_probs = T.softmax(q_logits)
    else:
        q_probs = T.transpose2d(T.softmax(T.transpose2d(q_logits)))
    return DiscOut(p_real=p_real, q_logits=q_logits, q_probs=q_probs)


def make_zq(z: Tensor, q_probs: Tensor, hard_onehot: bool = False) -> LatentFeature:
    """Concatenate latent features with quadrant probabilities."""
    if hard_onehot:
        probs = q_probs.array
        if probs.ndim == 1:
            hard = np.zeros_like(probs)
            hard[int(np.argmax(probs))] = 1.0
        else:
            hard = np.zeros_like(probs)
            hard[np.argmax(probs, axis=0), np.arange(probs.shape[-1])] = 1.0
        q_probs = Tensor(hard)
    return LatentFeature(z=z, q=q_probs, zq=T.concat([z, q_probs], axis=0))


class CombinerNet:
    """Final affect estimator; one of the three variants."""

    def __init__(self, variant: str, head: L.AffineLayer,
                 frame_stack: Optional[L.EncoderStack] = None,
                 lstm: Optional[L.LstmCell] = None,
                 attention: Optional[At.AttentionParams] = None,
                 n: int = 1, eq7_divide_by_n: bool = True):
        if variant not in VARIANTS:
            raise ShapeError(f"unknown combiner variant '{variant}'")
        if head.out_dim != 2:
            raise ShapeError("combiner head must emit exactly (V, A)")
        if variant == "frame" and frame_stack is None:
            raise ShapeError("frame variant requires an encoder stack")
        if variant != "frame" and lstm is None:
            raise ShapeError("sequence variants require an LSTM cell")
        if variant == "sequence_attention" and attention is None:
            raise ShapeError("attention variant requires attention parameters")
        self.variant = variant
        self.head = head
        self.frame_stack = frame_stack
        self.lstm = lstm
        self.attention = attention
        self.n = n
        self.eq7_divide_by_n = eq7_divide_by_n

    def parameters(self):
        out = []
        if self.frame_stack is not None:
            out += [(f"stack.{n}", p) for n, p in self.frame_stack.parameters()]
        if self.lstm is not None:
            out += [(f"lstm.{n}", p) for n, p in self.lstm.parameters()]
        if self.attention is not None:
            out += [(f"attention.{n}", p) for n, p in self.attention.parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.parameters()]
        return out


@dataclass
class AnclafModel:
    arch: ArchConfig
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    combiner: CombinerNet
    fold: int = 0
    dataset_tag: str = ""

    @property
    def name(self) -> str:
        if self.combiner.variant == "frame":
            return "ANCLaF"
        prefix = "ANCLaF-S" if self.combiner.variant == "sequence" else "ANCLaF-SA"
        return f"{prefix}-{self.combiner.n}"

    def parameters(self):
        out = [(f"g.{n}", p) for n, p in self.generator.parameters()]
        out += [(f"d.{n}", p) for n, p in self.discriminator.parameters()]
        out += [(f"c.{n}", p) for n, p in self.combiner.parameters()]
        return out


# -- construction ---------------------------------------------------------------


def build_generator(arch: ArchConfig, seed: int) -> GeneratorNet:
    enc = L.make_encoder(L.derive_rng(seed, "g.enc"), list(arch.g_dims))
    dec = L.make_decoder(L.derive_rng(seed, "g.dec"), list(reversed(arch.g_dims)))
    return GeneratorNet(enc, dec)


def build_discriminator(arch: ArchConfig, seed: int) -> DiscriminatorNet:
    enc = L.make_encoder(L.derive_rng(seed, "d.enc"), list(arch.d_dims))
    feat = arch.d_dims[-1]
    head_rf = L.make_affine(L.derive_rng(seed, "d.rf"), feat, 1, "sigmoid")
    head_q = L.make_affine(L.derive_rng(seed, "d.q"), feat, 4, "none")
    return DiscriminatorNet(enc, head_rf, head_q)


def build_combiner(arch: ArchConfig, variant: str, n: int, seed: int) -> CombinerNet:
    if variant == "frame":
        stack = L.make_encoder(L.derive_rng(seed, "c.stack"),
                               [arch.zq_dim, arch.c_frame_hidden])
        head = L.make_affine(L.derive_rng(seed, "c.head"), arch.c_frame_hidden, 2, "none")
        return CombinerNet("frame", head, frame_stack=stack, n=1,
                           eq7_divide_by_n=arch.eq7_divide_by_n)
    h = arch.hidden_size
    head = L.make_affine(L.derive_rng(seed, "c.head"), h, 2, "none")
    if variant == "sequence":
        lstm = L.make_lstm(L.derive_rng(seed, "c.lstm"), arch.zq_dim, h)
        return CombinerNet("sequence", head, lstm=lstm, n=n,
                           eq7_divide_by_n=arch.eq7_divide_by_n)
    lstm = L.make_lstm(L.derive_rng(seed, "c.lstm"), 2 * h + arch.zq_dim, h)
    attn = At.make_attention(L.derive_rng(seed, "c.attn"), h, arch.attention_mode)
    return CombinerNet("sequence_attention", head, lstm=lstm, attention=attn, n=n,
                       eq7_divide_by_n=arch.eq7_divide_by_n)


def build_model(arch: ArchConfig, variant: str, n: int, seed: int,
                fold: int = 0, dataset_tag: str = "") -> AnclafModel:
    return AnclafModel(
        arch=arch,
        generator=build_generator(arch, seed),
        discriminator=build_discriminator(arch, seed),
        combiner=build_combiner(arch, variant, n, seed),
        fold=fold,
        dataset_tag=dataset_tag,
    )


def widen_sequence_to_attention(model: AnclafModel, seed: int) -> AnclafModel:
    """ANCLaF-S-n weights into an ANCLaF-SA-n model.

    The LSTM input matrix gains 2h zero columns for the context vector, so
    the widened model's forward equals the source model's until attention
    training moves those columns.  Attention weights start fresh.
    """
    if model.combiner.variant != "sequence":
        raise ShapeError("can only widen a sequence-variant model")
    arch = model.arch
    h = arch.hidden_size
    old = model.combiner.lstm
    w_old = old.W.array
    w_new = np.zeros((4 * h, 2 * h + arch.zq_dim + h))
    w_new[:, 2 * h:2 * h + arch.zq_dim] = w_old[:, :arch.zq_dim]
    w_new[:, 2 * h + arch.zq_dim:] = w_old[:, arch.zq_dim:]
    lstm = L.LstmCell(Tensor(w_new, requires_grad=True),
                      Tensor(old.b.array.copy(), requires_grad=True),
                      2 * h + arch.zq_dim, h)
    head = L.AffineLayer(Tensor(model.combiner.head.weight.array.copy(), requires_grad=True),
                         Tensor(model.combiner.head.bias.array.copy(), requires_grad=True),
                         model.combiner.head.activation)
    attn = At.make_attention(L.derive_rng(seed, "c.attn"), h, arch.attention_mode)
    combiner = CombinerNet("sequence_attention", head, lstm=lstm, attention=attn,
                           n=model.combiner.n, eq7_divide_by_n=arch.eq7_divide_by_n)
    return AnclafModel(arch=arch, generator=model.generator,
                       discriminator=model.discriminator, combiner=combiner,
                       fold=model.fold, dataset_tag=model.dataset_tag)


# -- forward passes ---------------------------------------------------------------


def anclaf_forward(model: AnclafModel, image: Tensor):
    """Frame-variant prediction; returns ((V, A) tensor, LatentFeature trace)."""
    if model.combiner.variant != "frame":
        raise ShapeError(f"anclaf_forward on variant '{model.combiner.variant}'")
    z = model.generator.encode(image)
    recon = model.generator.decode(z)
    disc = discriminator_forward(model.discriminator, recon)
    feat = make_zq(z, disc.q_probs, model.arch.hard_quadrant_onehot)
    hidden = model.combiner.frame_stack.forward(feat.zq)
    pred = model.combiner.head.forward(hidden)
    return pred, feat


def extract_latent(model: AnclafModel, image: Tensor) -> LatentFeature:
    """ZQ features for one image (or batch) via the frozen G -> D path."""
    z = model.generator.encode(image)
    recon = model.generator.decode(z)
    disc = discriminator_forward(model.discriminator, recon)
    return make_zq(z, disc.q_probs, model.arch.hard_quadrant_onehot)


def anclaf_s_forward(combiner: CombinerNet, zq_sequence: Sequence[Tensor],
                     n: int, state: Optional[L.LstmState] = None):
    """LSTM threading over n conditioned features; one (V, A) per frame."""
    if combiner.variant != "sequence":
        raise ShapeError(f"anclaf_s_forward on variant '{combiner.variant}'")
    zq_sequence = list(zq_sequence)
    if len(zq_sequence) != n:
        raise ShapeError(f"sequence length {len(zq_sequence)} != configured n={n}")
    h = combiner.lstm.hidden_size
    if state is None:
        batch = None if zq_sequence[0].ndim == 1 else zq_sequence[0].shape[1]
        state = L.LstmState.zeros(h, batch)
    preds, states = [], []
    for zq in zq_sequence:
        y, state = combiner.lstm.step(zq, state)
        states.append(state)
        preds.append(combiner.head.forward(y))
    return preds, states


def anclaf_sa_forward(combiner: CombinerNet, zq_sequence: Sequence[Tensor],
                      n: int, state: Optional[L.LstmState] = None,
                      window: Optional[At.StateWindow] = None):
    """Attention variant: per frame, context over previous combined states.

    Returns (preds, states, weights) where weights[t] is None on frames
    whose window was empty (the first frame of a fresh sequence).
    """
    if combiner.variant != "sequence_attention":
        raise ShapeError(f"anclaf_sa_forward on variant '{combiner.variant}'")
    zq_sequence = list(zq_sequence)
    if len(zq_sequence) != n:
        raise ShapeError(f"sequence length {len(zq_sequence)} != configured n={n}")
    h = combiner.lstm.hidden_size
    if state is None:
        batch = None if zq_sequence[0].ndim == 1 else zq_sequence[0].shape[1]
        state = L.LstmState.zeros(h, batch)
    if window is None:
        window = At.StateWindow(combiner.n)
    preds, states, weights = [], [], []
    for zq in zq_sequence:
        aug, w = At.attend_and_augment(combiner.attention, zq, state, window,
                                       divide_by_count=combiner.eq7_divide_by_n)
        y, state = combiner.lstm.step(aug, state)
        window.push(At.combined_state(state))
        states.append(state)
        preds.append(combiner.head.forward(y))
        weights.append(w)
    return preds, states, weights
