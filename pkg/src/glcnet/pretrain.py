"""Self-supervised pretraining: global style contrast + local region matching.

The global branch contrasts whole-image style descriptors (channel-wise
mean and variance of encoder features) between two augmented views of each
sample. The local branch selects small regions in view one, finds the
region in view two whose center comes from the same original-image
location (via the index labels), and contrasts the matched region features
from the decoder output. The global branch trains only the encoder path;
the local branch trains encoder and decoder.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import (
    AugmentationPipeline,
    IndexLabel,
    make_view_pair,
    view_one_pipeline,
    view_two_pipeline,
)
from .checkpoint import CheckpointBundle, save_checkpoint
from .data import DatasetManifest, load_tile_image
from .losses import ContrastiveConfig, ContrastiveError, EmbeddingBatch, nt_xent_loss
from .network import ProjectionHead, SegmentationModel, parameter_groups

logger = logging.getLogger(__name__)


class PretrainError(ValueError):
    """Raised for invalid pretraining configuration or inputs."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending position."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class PretrainConfig:
    """Hyperparameters for the pretraining stage.

    Defaults are the full-scale settings; tests override them with the
    desk-scale profile (view 64, region 16, 2 regions, batch 8).
    """

    lam: float = 0.5
    temperature: float = 0.5
    region_size: int = 48
    regions_per_sample: int = 4
    batch_size: int = 64
    epochs: int = 400
    learning_rate: float = 0.01
    view_size: int = 224
    projection_dim: int = 128
    nostyle: bool = False
    noglobe: bool = False
    nolocal: bool = False
    include_positive_in_denominator: bool = False
    style_stat: str = "variance"
    match_tolerance: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise PretrainError(f"lam must be in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise PretrainError(f"temperature must be > 0, got {self.temperature}")
        if self.regions_per_sample < 1:
            raise PretrainError("regions_per_sample must be >= 1")
        if self.region_size > self.view_size:
            raise PretrainError(
                f"region_size {self.region_size} exceeds view size {self.view_size}"
            )
        if self.noglobe and self.nolocal:
            raise PretrainError("noglobe and nolocal cannot both be set")
        if self.style_stat not in ("variance", "std"):
            raise PretrainError(f"style_stat must be 'variance' or 'std', got {self.style_stat!r}")


@dataclass
class LossReport:
    epoch: int
    step: int
    l_global: float
    l_local: float
    l_total: float
    lr: float


# ---------------------------------------------------------------------------
# feature descriptors
# ---------------------------------------------------------------------------


def style_vector(feature_map: torch.Tensor, stat: str = "variance") -> torch.Tensor:
    """Channel-wise mean concatenated with channel-wise variance.

    Accepts (C, h, w) or a batch (B, C, h, w); variance uses the population
    divisor h*w. ``stat='std'`` substitutes the standard deviation.
    """
    single = feature_map.ndim == 3
    fmap = feature_map.unsqueeze(0) if single else feature_map
    if fmap.ndim != 4 or fmap.shape[2] * fmap.shape[3] < 1:
        raise PretrainError(f"feature map must be (B, C, h, w) with h*w >= 1, got {tuple(feature_map.shape)}")
    mean = fmap.mean(dim=(2, 3))
    var = fmap.var(dim=(2, 3), unbiased=False)
    if stat == "std":
        var = torch.sqrt(var)
    out = torch.cat([mean, var], dim=1)
    return out.squeeze(0) if single else out


def average_pool_vector(feature_map: torch.Tensor) -> torch.Tensor:
    """Plain global average pooling; the nostyle fallback descriptor."""
    single = feature_map.ndim == 3
    fmap = feature_map.unsqueeze(0) if single else feature_map
    if fmap.ndim != 4 or fmap.shape[2] * fmap.shape[3] < 1:
        raise PretrainError(f"feature map must be (B, C, h, w) with h*w >= 1, got {tuple(feature_map.shape)}")
    out = fmap.mean(dim=(2, 3))
    return out.squeeze(0) if single else out


# ---------------------------------------------------------------------------
# local region selection and matching
# ---------------------------------------------------------------------------


@dataclass
class LocalRegionSpec:
    """A matched pair of square regions, one rectangle per view.

    ``center`` is the shared original-image coordinate; the two rectangles
    are (top, left) corners in their respective views. ``match_distance``
    is how far (in original-image pixels) the view-b center's recorded
    coordinate sits from ``center``; it is nonzero only when resampling
    dropped the exact coordinate.
    """

    center: tuple[int, int]
    size: int
    rect_a: tuple[int, int]
    rect_b: tuple[int, int]
    match_distance: float = 0.0


def _rect_contains(rect: tuple[int, int], size: int, point: tuple[int, int]) -> bool:
    return rect[0] <= point[0] < rect[0] + size and rect[1] <= point[1] < rect[1] + size


def select_local_regions(
    index_a: IndexLabel,
    index_b: IndexLabel,
    region_size: int,
    num_regions: int,
    rng: np.random.Generator,
    match_tolerance: float = 1.0,
    max_retries: int | None = None,
) -> list[LocalRegionSpec]:
    """Pick up to ``num_regions`` matched region pairs across two views.

    Regions are sampled uniformly in view a, excluding centers that fall
    inside any previously selected view-a rectangle. The partner center in
    view b is the pixel whose recorded original coordinate is nearest to
    the view-a center's, searched only over positions where the region
    fits inside view b. A candidate is dropped when the views do not
    overlap there (nearest distance above region_size/4), when the best
    feasible match is farther than ``match_tolerance`` original-image
    pixels, or when a strictly closer coordinate exists in view b but only
    at a border position the region cannot be centered on (shifting the
    rectangle inward would silently move its center off the match). Runs a
    bounded number of attempts and returns whatever was found; an empty
    result is a skip event for the caller, not an error.
    """
    ha, wa = index_a.valid.shape
    hb, wb = index_b.valid.shape
    if region_size > min(ha, wa, hb, wb):
        raise PretrainError(f"region size {region_size} does not fit views {ha}x{wa} / {hb}x{wb}")
    if num_regions < 1:
        raise PretrainError("num_regions must be >= 1")

    half = region_size // 2
    retries = max_retries if max_retries is not None else 10 * num_regions
    b_rows = index_b.coords[0].astype(np.int64)
    b_cols = index_b.coords[1].astype(np.int64)
    infinity = np.iinfo(np.int64).max
    feasible = np.zeros((hb, wb), dtype=bool)
    feasible[half : hb - region_size + half + 1, half : wb - region_size + half + 1] = True
    feasible &= index_b.valid

    specs: list[LocalRegionSpec] = []
    for _ in range(retries):
        if len(specs) >= num_regions:
            break
        top_a = int(rng.integers(0, ha - region_size + 1))
        left_a = int(rng.integers(0, wa - region_size + 1))
        ca = (top_a + half, left_a + half)
        if any(_rect_contains(s.rect_a, region_size, ca) for s in specs):
            continue
        if not index_a.valid[ca]:
            continue
        target = (int(index_a.coords[0, ca[0], ca[1]]), int(index_a.coords[1, ca[0], ca[1]]))

        d2 = (b_rows - target[0]) ** 2 + (b_cols - target[1]) ** 2
        best_any = int(np.where(index_b.valid, d2, infinity).min())
        d2_feasible = np.where(feasible, d2, infinity)
        flat = int(np.argmin(d2_feasible))
        cb = (flat // wb, flat % wb)
        best_feasible = int(d2_feasible[cb])
        if best_feasible == infinity:
            continue
        dist = math.sqrt(float(best_feasible))
        if dist > region_size / 4 or dist > match_tolerance:
            continue
        if best_feasible > best_any:
            continue

        specs.append(
            LocalRegionSpec(
                center=target,
                size=region_size,
                rect_a=(top_a, left_a),
                rect_b=(cb[0] - half, cb[1] - half),
                match_distance=dist,
            )
        )
    return specs


def extract_local_features(
    decoder_map: torch.Tensor, rects: list[tuple[int, int]], size: int
) -> torch.Tensor:
    """Per-channel mean over each (top, left) square region of one map."""
    if decoder_map.ndim != 3:
        raise PretrainError(f"decoder map must be (C, H, W), got {tuple(decoder_map.shape)}")
    _, h, w = decoder_map.shape
    feats = []
    for top, left in rects:
        if top < 0 or left < 0 or top + size > h or left + size > w:
            raise PretrainError(f"region ({top}, {left}) size {size} outside {h}x{w} map")
        feats.append(decoder_map[:, top : top + size, left : left + size].mean(dim=(1, 2)))
    return torch.stack(feats) if feats else decoder_map.new_zeros((0, decoder_map.shape[0]))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _contrastive_cfg(cfg: PretrainConfig) -> ContrastiveConfig:
    return ContrastiveConfig(
        temperature=cfg.temperature,
        include_positive_in_denominator=cfg.include_positive_in_denominator,
    )


def global_style_loss(
    maps_a: torch.Tensor,
    maps_b: torch.Tensor,
    head: ProjectionHead | None,
    cfg: PretrainConfig,
) -> torch.Tensor:
    """Contrastive loss over per-view global descriptors.

    With ``nostyle`` the descriptor degrades to plain average pooling,
    which is exactly the image-level baseline configuration.
    """
    if maps_a.shape != maps_b.shape:
        raise PretrainError("view feature maps must have matching shapes")
    if maps_a.shape[0] < 2:
        raise PretrainError("global loss needs at least 2 samples per batch")
    maps = torch.cat([maps_a, maps_b], dim=0)
    vecs = average_pool_vector(maps) if cfg.nostyle else style_vector(maps, cfg.style_stat)
    emb = head(vecs) if head is not None else vecs
    return nt_xent_loss(EmbeddingBatch(emb), _contrastive_cfg(cfg))


def local_matching_loss(
    feats_a: torch.Tensor,
    feats_b: torch.Tensor,
    head: ProjectionHead | None,
    cfg: PretrainConfig,
) -> torch.Tensor | None:
    """Contrastive loss over matched region features.

    Matched pairs are positives; every other region in the batch, including
    regions from the same image, is a negative. Returns None (a skip, not
    an error) when fewer than two pairs are available.
    """
    if feats_a.shape != feats_b.shape:
        raise PretrainError("matched region features must have identical shapes")
    if feats_a.shape[0] < 2:
        logger.warning(
            "local matching skipped: %d region pair(s) in batch (need >= 2)", feats_a.shape[0]
        )
        return None
    emb = torch.cat([feats_a, feats_b], dim=0)
    if head is not None:
        emb = head(emb)
    return nt_xent_loss(EmbeddingBatch(emb), _contrastive_cfg(cfg))


def total_loss(l_global, l_local, lam: float, *, noglobe: bool = False, nolocal: bool = False):
    """Weighted combination, with a disabled branch taking full weight.

    Ablations drop the disabled term entirely rather than rescaling the
    survivor by lam, so ablated runs differ in objective, not in effective
    learning rate.
    """
    if not 0.0 <= lam <= 1.0:
        raise PretrainError(f"lam must be in [0, 1], got {lam}")
    if noglobe and nolocal:
        raise PretrainError("noglobe and nolocal cannot both be set")
    if noglobe:
        return l_local
    if nolocal:
        return l_global
    return lam * l_global + (1.0 - lam) * l_local


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def build_projection_heads(
    encoder_channels: int, decoder_channels: int, cfg: PretrainConfig, seed: int
) -> tuple[ProjectionHead, ProjectionHead]:
    """Both heads are always built (ablated ones just never see gradients)."""
    torch.manual_seed(int(np.random.SeedSequence([seed, 4]).generate_state(1)[0]))
    global_in = encoder_channels if cfg.nostyle else 2 * encoder_channels
    proj_global = ProjectionHead(global_in, cfg.projection_dim)
    proj_local = ProjectionHead(decoder_channels, cfg.projection_dim)
    return proj_global, proj_local


class Pretrainer:
    """Drives the two-branch contrastive objective over augmented view pairs."""

    def __init__(
        self,
        model: SegmentationModel,
        cfg: PretrainConfig,
        seed: int,
        t1: AugmentationPipeline | None = None,
        t2: AugmentationPipeline | None = None,
    ):
        # channels-last layout: noticeably faster CPU convolutions, same values
        self.model = model.to(memory_format=torch.channels_last)
        self.cfg = cfg
        self.seed = seed
        self.t1 = t1 if t1 is not None else view_one_pipeline(cfg.view_size)
        self.t2 = t2 if t2 is not None else view_two_pipeline(cfg.view_size)
        self.proj_global, self.proj_local = build_projection_heads(
            model.encoder.out_channels, model.decoder.out_channels, cfg, seed
        )
        params = (
            list(model.encoder.parameters())
            + list(model.decoder.parameters())
            + list(self.proj_global.parameters())
            + list(self.proj_local.parameters())
        )
        self.optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
        self.skip_events = 0

    def groups(self) -> dict:
        return parameter_groups(self.model, self.proj_global, self.proj_local)

    def _rng(self, role: int, epoch: int, sample: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, role, epoch, sample]))

    def make_views(
        self, images: list[np.ndarray], epoch: int, sample_ids: list[int]
    ) -> tuple[torch.Tensor, torch.Tensor, list[IndexLabel], list[IndexLabel]]:
        pairs = [
            make_view_pair(
                img, self.t1, self.t2, self._rng(1, epoch, sid), self._rng(2, epoch, sid), sid
            )
            for img, sid in zip(images, sample_ids)
        ]
        batch_a = torch.from_numpy(np.stack([p.image_a for p in pairs])).to(
            memory_format=torch.channels_last
        )
        batch_b = torch.from_numpy(np.stack([p.image_b for p in pairs])).to(
            memory_format=torch.channels_last
        )
        return batch_a, batch_b, [p.index_a for p in pairs], [p.index_b for p in pairs]

    def step(
        self, images: list[np.ndarray], epoch: int, step_idx: int, sample_ids: list[int], lr: float
    ) -> LossReport:
        cfg = self.cfg
        n = len(images)
        if n < 2:
            raise PretrainError("mini-batch must contain at least 2 samples")
        batch_a, batch_b, idx_a, idx_b = self.make_views(images, epoch, sample_ids)

        self.model.train()
        self.proj_global.train()
        self.proj_local.train()
        try:
            return self._losses_and_update(batch_a, batch_b, idx_a, idx_b, epoch, step_idx, sample_ids, lr)
        except ContrastiveError as exc:
            # a collapsed or non-finite embedding mid-training is divergence
            raise DivergenceError(epoch, step_idx) from exc

    def _losses_and_update(self, batch_a, batch_b, idx_a, idx_b, epoch, step_idx, sample_ids, lr):
        cfg = self.cfg
        n = batch_a.shape[0]
        enc = self.model.encoder(torch.cat([batch_a, batch_b], dim=0))

        l_g = None
        if not cfg.noglobe:
            l_g = global_style_loss(enc[:n], enc[n:], self.proj_global, cfg)

        l_l = None
        if not cfg.nolocal:
            dense = self.model.decoder(enc)
            feats_a, feats_b = [], []
            for i in range(n):
                specs = select_local_regions(
                    idx_a[i],
                    idx_b[i],
                    cfg.region_size,
                    cfg.regions_per_sample,
                    self._rng(3, epoch, sample_ids[i]),
                    match_tolerance=cfg.match_tolerance,
                )
                if specs:
                    feats_a.append(
                        extract_local_features(dense[i], [s.rect_a for s in specs], cfg.region_size)
                    )
                    feats_b.append(
                        extract_local_features(dense[n + i], [s.rect_b for s in specs], cfg.region_size)
                    )
            if feats_a:
                fa = torch.cat(feats_a, dim=0)
                fb = torch.cat(feats_b, dim=0)
                l_l = local_matching_loss(fa, fb, self.proj_local, cfg)
            else:
                logger.warning("local matching skipped: no valid region pairs in batch")
            if l_l is None:
                self.skip_events += 1

        zero = enc.new_zeros(())
        loss = total_loss(
            l_g if l_g is not None else zero,
            l_l if l_l is not None else zero,
            cfg.lam,
            noglobe=cfg.noglobe,
            nolocal=cfg.nolocal,
        )
        if not torch.isfinite(loss):
            raise DivergenceError(epoch, step_idx)

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        lg_val = float(l_g.detach()) if l_g is not None else 0.0
        ll_val = float(l_l.detach()) if l_l is not None else 0.0
        if cfg.noglobe:
            total_val = ll_val
        elif cfg.nolocal:
            total_val = lg_val
        else:
            total_val = cfg.lam * lg_val + (1.0 - cfg.lam) * ll_val
        return LossReport(epoch, step_idx, lg_val, ll_val, total_val, lr)


def write_loss_csv(reports: list[LossReport], path: Path, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "step", "l_global", "l_local", "l_total", "lr"])
        for r in reports:
            writer.writerow(
                [r.epoch, r.step, f"{r.l_global:.12g}", f"{r.l_local:.12g}", f"{r.l_total:.12g}", f"{r.lr:.12g}"]
            )


def run_pretraining(
    manifest: DatasetManifest,
    base_dir: Path,
    model: SegmentationModel,
    cfg: PretrainConfig,
    seed: int,
    out_dir: Path | None = None,
    config_hash: str = "",
    t1: AugmentationPipeline | None = None,
    t2: AugmentationPipeline | None = None,
) -> tuple[CheckpointBundle, list[LossReport]]:
    """Full pretraining pass; saves and returns the lowest-loss checkpoint.

    Per mini-batch: build index labels, draw both augmented views, compute
    the global and local losses, combine, and take one optimizer step. The
    checkpoint with the lowest per-epoch mean total loss is kept.
    """
    if len(manifest) == 0:
        raise PretrainError("pretraining manifest is empty")
    tiles = [load_tile_image(p) for p, _ in manifest.resolve(base_dir)]

    trainer = Pretrainer(model, cfg, seed, t1=t1, t2=t2)
    reports: list[LossReport] = []
    best_loss = math.inf
    best_epoch = -1
    best_state: dict[str, dict[str, torch.Tensor]] | None = None

    for epoch in range(cfg.epochs):
        lr = _cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        for group in trainer.optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 5, epoch])
        ).permutation(len(tiles))

        epoch_losses = []
        step_idx = 0
        for start in range(0, len(order), cfg.batch_size):
            ids = [int(i) for i in order[start : start + cfg.batch_size]]
            if len(ids) < 2:
                continue
            report = trainer.step([tiles[i] for i in ids], epoch, step_idx, ids, lr)
            reports.append(report)
            epoch_losses.append(report.l_total)
            step_idx += 1

        epoch_mean = float(np.mean(epoch_losses)) if epoch_losses else math.inf
        logger.info("pretrain epoch %d: mean loss %.5f (lr %.5g)", epoch, epoch_mean, lr)
        if epoch_mean < best_loss:
            best_loss = epoch_mean
            best_epoch = epoch
            best_state = {
                name: {k: v.detach().clone() for k, v in module.state_dict().items()}
                for name, module in trainer.groups().items()
            }

    if best_state is None:
        raise PretrainError("no training steps were executed")

    meta = {
        "epoch": best_epoch,
        "loss": best_loss,
        "config_hash": config_hash,
        "seed": seed,
        "pretrain_config": asdict(cfg),
    }
    groups_np = {
        name: {k: v.contiguous().cpu().numpy().copy(order="C") for k, v in state.items()}
        for name, state in best_state.items()
    }
    bundle = CheckpointBundle(meta=meta, groups=groups_np)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        class _StateHolder:
            def __init__(self, state):
                self._state = state

            def state_dict(self):
                return self._state

        save_checkpoint(
            out_dir / "checkpoint.glcp",
            {name: _StateHolder(state) for name, state in best_state.items()},
            meta,
        )
        write_loss_csv(reports, out_dir / "loss_log.csv", config_hash)
    return bundle, reports
