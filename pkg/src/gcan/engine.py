"""Adversarial engine producing target-label FC matrices.

The generator encodes a noisy source FC into per-network tokens, decodes
them back into a reconstructed source FC, and decodes a second time after
adding a learned projection of the encoded target-class mean FC, giving
the counterfactual target-label FC. Two discriminators (a per-token image
critic and a neurodegeneration branch feeding the frozen verifier
classifier) supply the four discriminator losses; the generator loss is
perceptual + label cross-entropy + reconstruction.

All nine per-step loss values are logged as a LossReport whose sum
identities are enforced at construction time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aabt import AABTConfig, AtlasDecoder, AtlasEncoder
from .diagnoser import Classifier
from .errors import DivergenceError, EmptyClassError, ParameterError
from .fc import AtlasPartition, Cohort, FCMatrix, Label, Split, add_noise, mean_fc, task_classes

#: clamp for the log arguments of the product-form discriminator losses
LOG_EPS = 1e-7

#: any logged loss beyond this magnitude aborts training
DIVERGENCE_LIMIT = 1e4


@dataclass(frozen=True)
class LossReport:
    """One training step's loss values; sum identities hold within 1e-9."""

    l_p: float
    l_gen: float
    l_c: float
    l_G: float
    l_dc: float
    l_dsl: float
    l_dtl: float
    l_dD: float
    l_D: float

    FIELDS = ("l_p", "l_gen", "l_c", "l_G", "l_dc", "l_dsl", "l_dtl", "l_dD", "l_D")

    def __post_init__(self):
        if abs(self.l_G - (self.l_p + self.l_c + self.l_gen)) > 1e-9:
            raise ParameterError("l_G must equal l_p + l_c + l_gen")
        if abs(self.l_D - (self.l_dc + self.l_dsl + self.l_dtl + self.l_dD)) > 1e-9:
            raise ParameterError("l_D must equal l_dc + l_dsl + l_dtl + l_dD")

    @classmethod
    def from_parts(cls, l_p, l_gen, l_c, l_dc, l_dsl, l_dtl, l_dD) -> "LossReport":
        return cls(
            l_p=l_p,
            l_gen=l_gen,
            l_c=l_c,
            l_G=l_p + l_c + l_gen,
            l_dc=l_dc,
            l_dsl=l_dsl,
            l_dtl=l_dtl,
            l_dD=l_dD,
            l_D=l_dc + l_dsl + l_dtl + l_dD,
        )


def write_loss_history(history: list[LossReport], path) -> None:
    """CSV ``step,l_p,l_gen,l_c,l_G,l_dc,l_dsl,l_dtl,l_dD,l_D`` at full precision."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step",) + LossReport.FIELDS)
        for step, report in enumerate(history):
            w.writerow([step] + [f"{getattr(report, k):.17g}" for k in LossReport.FIELDS])


# ---------------------------------------------------------------------------
# models


class Generator(nn.Module):
    """Mirrored encoder/decoder with a feature-level combiner.

    ``generate`` returns both the reconstructed source FC and the
    counterfactual target FC; forcing the combiner weights to zero makes
    the two outputs identical (the zero-counterfactual baseline).
    """

    def __init__(self, cfg: AABTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AtlasEncoder(cfg)
        self.decoder = AtlasDecoder(cfg, depth=cfg.depth, constrain=True)
        self.combiner = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def encode(self, x) -> torch.Tensor:
        return self.encoder(x)

    def generate(self, noisy_source, target_tokens):
        feature = self.encoder(noisy_source)
        gen_source = self.decoder(feature)
        gen_target = self.decoder(feature + self.combiner(target_tokens))
        return gen_source, gen_target

    forward = generate


class ImageDiscriminator(nn.Module):
    """Per-token realness logits over the encoded input."""

    def __init__(self, cfg: AABTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AtlasEncoder(cfg)
        self.head = nn.Linear(cfg.embed_dim, 1)

    def forward(self, x):
        tokens = self.encoder(x)  # (b, networks, tokens, dim)
        return self.head(tokens).squeeze(-1).flatten(1)  # (b, networks*tokens)


class NeuroDiscriminator(nn.Module):
    """Encodes then decodes to an unconstrained (N, N) map for the verifier."""

    def __init__(self, cfg: AABTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AtlasEncoder(cfg)
        self.decoder = AtlasDecoder(cfg, depth=0, constrain=False)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class PerceptualExtractor(nn.Module):
    """Frozen 5-stage convolutional pyramid for perceptual comparison.

    Weights are drawn once from a fixed seed and never trained. Inputs in
    [-1, 1] are replicated to 3 channels and rescaled to [0, 1]; features
    are taken after the configured stages (default 2 and 3). Smooth
    activations and average pooling keep the module cleanly differentiable
    with respect to its input.
    """

    STAGE_CHANNELS = (16, 32, 64, 128, 128)

    def __init__(self, seed: int = 1234, feature_stages: tuple[int, ...] = (2, 3)):
        super().__init__()
        if any(not 1 <= s <= len(self.STAGE_CHANNELS) for s in feature_stages):
            raise ParameterError(f"feature_stages must be within 1..{len(self.STAGE_CHANNELS)}")
        torch.manual_seed(seed)
        self.feature_stages = tuple(feature_stages)
        stages = []
        in_ch = 3
        for out_ch in self.STAGE_CHANNELS:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 3, padding=1),
                    nn.GELU(),
                    nn.Conv2d(out_ch, out_ch, 3, padding=1),
                    nn.GELU(),
                    nn.AvgPool2d(2, ceil_mode=True),
                )
            )
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> list[torch.Tensor]:
        if x.ndim == 2:
            x = x[None]
        x = ((x + 1.0) / 2.0).unsqueeze(1).repeat(1, 3, 1, 1)
        feats = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in self.feature_stages:
                feats.append(x)
        return feats


# ---------------------------------------------------------------------------
# losses


def _as_batched_tensor(x, dtype, device=None):
    if isinstance(x, FCMatrix):
        x = x.values
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    x = x.to(dtype=dtype, device=device)
    return x[None] if x.ndim == 2 else x


def perceptual_loss(gen_source, real_source, extractor: PerceptualExtractor):
    """MSE between frozen pyramid features, averaged over the layer set."""
    dtype = next(extractor.parameters()).dtype
    a = _as_batched_tensor(gen_source, dtype)
    b = _as_batched_tensor(real_source, dtype)
    feats_a = extractor(a)
    feats_b = extractor(b)
    losses = [F.mse_loss(fa, fb) for fa, fb in zip(feats_a, feats_b)]
    return torch.stack(losses).mean()


def recon_loss(gen_source, real_source):
    """Elementwise mean squared error between two FC matrices."""
    if isinstance(gen_source, FCMatrix) or isinstance(gen_source, np.ndarray):
        gen_source = _as_batched_tensor(gen_source, torch.float64)
    if isinstance(real_source, FCMatrix) or isinstance(real_source, np.ndarray):
        real_source = _as_batched_tensor(real_source, torch.float64).to(gen_source.dtype)
    if gen_source.shape[-2:] != real_source.shape[-2:]:
        raise ParameterError(
            f"shape mismatch: {tuple(gen_source.shape)} vs {tuple(real_source.shape)}"
        )
    return F.mse_loss(gen_source, real_source)


def label_ce_loss(gen_target, target_class: int, cls: Classifier):
    """Cross-entropy of the frozen verifier's logits against the target class.

    Gradients flow through the verifier to the generated input; the
    verifier's own parameters stay frozen.
    """
    dtype = cls.fc.weight.dtype
    x = _as_batched_tensor(gen_target, dtype)
    logits = cls(x)
    target = torch.full((x.shape[0],), target_class, dtype=torch.long, device=x.device)
    return F.cross_entropy(logits, target)


def generator_loss(l_p, l_c, l_gen):
    """Unweighted sum of the three generator terms."""
    return l_p + l_c + l_gen


def _clamped_log(t):
    return torch.log(torch.clamp(t, min=LOG_EPS, max=1.0))


def disc_image_loss(gen_source, real_source, d_i: ImageDiscriminator):
    """Mean over tokens of log(1 - S(D(gen))) * log(S(D(real))), clamped."""
    dtype = next(d_i.parameters()).dtype
    s_gen = torch.sigmoid(d_i(_as_batched_tensor(gen_source, dtype)))
    s_real = torch.sigmoid(d_i(_as_batched_tensor(real_source, dtype)))
    return (_clamped_log(1.0 - s_gen) * _clamped_log(s_real)).mean()


def disc_divergence_loss(gen_source, gen_target, d_i: ImageDiscriminator):
    """Mean over tokens of log(1 - S(D(gen_s))) * log(1 - S(D(gen_t)))."""
    dtype = next(d_i.parameters()).dtype
    s_src = torch.sigmoid(d_i(_as_batched_tensor(gen_source, dtype)))
    s_tgt = torch.sigmoid(d_i(_as_batched_tensor(gen_target, dtype)))
    return (_clamped_log(1.0 - s_src) * _clamped_log(1.0 - s_tgt)).mean()


def disc_label_losses(
    gen_source, gen_target, source_class: int, target_class: int,
    d_n: NeuroDiscriminator, cls: Classifier,
):
    """Verifier cross-entropies on the neurodegeneration branch's maps."""
    l_sl = label_ce_loss(d_n(_as_batched_tensor(gen_source, next(d_n.parameters()).dtype)), source_class, cls)
    l_tl = label_ce_loss(d_n(_as_batched_tensor(gen_target, next(d_n.parameters()).dtype)), target_class, cls)
    return l_sl, l_tl


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class GcanTrainConfig:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-4
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ParameterError("steps, batch_size, learning_rate must be positive")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _symmetric_noise_like(x, sigma: float, generator: torch.Generator):
    g = torch.randn(x.shape, generator=generator, dtype=x.dtype) * sigma
    return torch.triu(g) + torch.triu(g, diagonal=1).transpose(-2, -1)


def _check_finite(step: int, values: dict[str, float]) -> None:
    for name, v in values.items():
        if not np.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            detail = ", ".join(f"{k}={val:.4g}" for k, val in values.items())
        # fall through so the error carries every loss value at the bad step
            raise DivergenceError(f"{name} diverged at step {step}: {detail}")


def train_gcan(
    cohort: Cohort,
    task: tuple[Label, Label],
    cls: Classifier,
    generator: Generator,
    d_image: ImageDiscriminator,
    d_neuro: NeuroDiscriminator,
    extractor: PerceptualExtractor,
    tc: GcanTrainConfig,
) -> list[LossReport]:
    """Alternating adversarial optimization for one (source, target) direction.

    Per batch: a discriminator step minimizes the four-term discriminator
    loss with the generator frozen, then a generator step minimizes
    perceptual + label + reconstruction with the discriminators frozen.
    The target-class mean FC comes from the train split once and is
    re-encoded with the current encoder every generator step. Deterministic
    for a fixed seed; aborts with diagnostics if any loss leaves
    [-1e4, 1e4] or turns non-finite.
    """
    source_label, target_label = task
    neg, _pos = task_classes(task)
    source_class = 0 if source_label == neg else 1
    target_class = 1 - source_class

    sources = cohort.select(source_label, Split.TRAIN)
    if not sources:
        raise EmptyClassError(f"no {source_label.value} subjects in train split")
    target_mean = mean_fc(cohort, target_label, Split.TRAIN)

    dtype = next(generator.parameters()).dtype
    x_src = torch.from_numpy(np.stack([s.fc.values for s in sources])).to(dtype)
    tgt_mean = torch.from_numpy(target_mean.values).to(dtype)[None]

    cls.eval()
    cls.requires_grad_(False)
    extractor.eval()
    extractor.requires_grad_(False)

    opt_g = torch.optim.Adam(generator.parameters(), lr=tc.learning_rate)
    disc_params = list(d_image.parameters()) + list(d_neuro.parameters())
    opt_d = torch.optim.Adam(disc_params, lr=tc.learning_rate)

    rng = np.random.default_rng(tc.seed)
    noise_gen = torch.Generator().manual_seed(tc.seed)

    history: list[LossReport] = []
    for step in range(tc.steps):
        idx = rng.choice(len(sources), size=tc.batch_size, replace=len(sources) < tc.batch_size)
        real = x_src[idx]
        noisy = real + _symmetric_noise_like(real, tc.noise_sigma, noise_gen)

        # discriminator step; generator outputs detached by no_grad
        with torch.no_grad():
            tgt_tokens = generator.encode(tgt_mean)
            gen_src, gen_tgt = generator.generate(noisy, tgt_tokens)
        l_dc = disc_image_loss(gen_src, real, d_image)
        l_dsl, l_dtl = disc_label_losses(gen_src, gen_tgt, source_class, target_class, d_neuro, cls)
        l_dD = disc_divergence_loss(gen_src, gen_tgt, d_image)
        loss_d = l_dc + l_dsl + l_dtl + l_dD
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        # generator step; target mean re-encoded under current encoder params
        tgt_tokens = generator.encode(tgt_mean)
        gen_src, gen_tgt = generator.generate(noisy, tgt_tokens)
        l_p = perceptual_loss(gen_src, real, extractor)
        l_gen = recon_loss(gen_src, real)
        l_c = label_ce_loss(gen_tgt, target_class, cls)
        loss_g = generator_loss(l_p, l_c, l_gen)
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        values = {
            "l_p": float(l_p), "l_gen": float(l_gen), "l_c": float(l_c),
            "l_dc": float(l_dc), "l_dsl": float(l_dsl), "l_dtl": float(l_dtl),
            "l_dD": float(l_dD),
        }
        _check_finite(step, values)
        history.append(LossReport.from_parts(**values))

    return history


def generate_counterfactual(
    generator: Generator,
    source_fc: FCMatrix,
    target_mean: FCMatrix,
    noise_sigma: float,
    seed: int,
) -> tuple[FCMatrix, FCMatrix]:
    """One subject's reconstructed source FC and generated target FC."""
    dtype = next(generator.parameters()).dtype
    noisy = torch.from_numpy(add_noise(source_fc, noise_sigma, seed)).to(dtype)[None]
    tgt = torch.from_numpy(target_mean.values).to(dtype)[None]
    generator.eval()
    with torch.no_grad():
        tokens = generator.encode(tgt)
        gen_src, gen_tgt = generator.generate(noisy, tokens)
    atlas = source_fc.atlas
    return (
        FCMatrix(gen_src[0].double().numpy(), atlas),
        FCMatrix(gen_tgt[0].double().numpy(), atlas),
    )


# ---------------------------------------------------------------------------
# checkpoints


def build_gcan(
    atlas, *, embed_dim=128, num_heads=8, patch_width=16, mlp_ratio=4.0,
    gen_depth=3, disc_depth=8, seed=0, dtype=torch.float32,
) -> tuple[Generator, ImageDiscriminator, NeuroDiscriminator]:
    """Deterministically initialized generator and discriminators."""
    gen_cfg = AABTConfig(
        atlas=atlas, depth=gen_depth, embed_dim=embed_dim,
        num_heads=num_heads, patch_width=patch_width, mlp_ratio=mlp_ratio,
    )
    disc_cfg = AABTConfig(
        atlas=atlas, depth=disc_depth, embed_dim=embed_dim,
        num_heads=num_heads, patch_width=patch_width, mlp_ratio=mlp_ratio,
    )
    torch.manual_seed(seed)
    generator = Generator(gen_cfg).to(dtype)
    d_image = ImageDiscriminator(disc_cfg).to(dtype)
    d_neuro = NeuroDiscriminator(disc_cfg).to(dtype)
    return generator, d_image, d_neuro


def save_gcan(generator, d_image, d_neuro, path, extra: dict | None = None) -> None:
    cfg = generator.cfg
    payload = {
        "kind": "gcan",
        "arch": {
            "networks": list(cfg.atlas.networks),
            "embed_dim": cfg.embed_dim,
            "num_heads": cfg.num_heads,
            "patch_width": cfg.patch_width,
            "mlp_ratio": cfg.mlp_ratio,
            "gen_depth": cfg.depth,
            "disc_depth": d_image.cfg.depth,
        },
        "generator": generator.state_dict(),
        "d_image": d_image.state_dict(),
        "d_neuro": d_neuro.state_dict(),
    }
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_gcan(path, dtype=torch.float32):
    from .fc import AtlasPartition

    payload = torch.load(path, map_location="cpu", weights_only=False)
    arch = payload["arch"]
    atlas = AtlasPartition(tuple((str(n), int(c)) for n, c in arch["networks"]))
    generator, d_image, d_neuro = build_gcan(
        atlas,
        embed_dim=arch["embed_dim"],
        num_heads=arch["num_heads"],
        patch_width=arch["patch_width"],
        mlp_ratio=arch["mlp_ratio"],
        gen_depth=arch["gen_depth"],
        disc_depth=arch["disc_depth"],
        dtype=dtype,
    )
    generator.load_state_dict(payload["generator"])
    d_image.load_state_dict(payload["d_image"])
    d_neuro.load_state_dict(payload["d_neuro"])
    extra = {
        k: v
        for k, v in payload.items()
        if k not in ("kind", "arch", "generator", "d_image", "d_neuro")
    }
    return generator, d_image, d_neuro, extra
