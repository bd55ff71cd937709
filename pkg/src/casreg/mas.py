"""Multi-atlas segmentation: register a bank, select by NCC, propagate, fuse.

Each atlas is registered independently onto the target (atlas = moving,
target = fixed). The best-aligned atlases by global NCC are kept, their
labels are pulled back with nearest-neighbour sampling and combined by
majority voting or by local weighted voting, where atlas ``k`` votes at
voxel ``i`` with weight ``|m_ki|^g`` and ``m_ki`` is the local Pearson
correlation between the warped atlas and the target around ``i``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from casreg import _kernels
from casreg.deform import warp_labels, warp_scalar
from casreg.registration import (
    RegistrationConfig,
    RigidTransform,
    apply_rigid,
    cascade_register,
    rigid_register,
)
from casreg.similarity import global_ncc, local_correlation
from casreg.volume import load_labels, load_volume, save_volume

log = logging.getLogger(__name__)

FUSION_METHODS = ("majority", "lwv")
DEFAULT_K = 10


class AllRegistrationsFailed(RuntimeError):
    """No atlas of the bank could be registered to the target."""


@dataclass(frozen=True)
class Atlas:
    image: np.ndarray
    labels: np.ndarray
    atlas_id: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.shape(self.image) != np.shape(self.labels):
            raise ValueError(f"atlas {self.atlas_id}: image dims {np.shape(self.image)} "
                             f"!= label dims {np.shape(self.labels)}")


@dataclass(frozen=True)
class AtlasAlignment:
    atlas_id: str
    field: np.ndarray
    warped_image: np.ndarray
    score: float
    rigid: RigidTransform | None = None  # applied before ``field`` when rigid_init was used
    folding_fraction: float = 0.0
    seconds: float = 0.0


@dataclass(frozen=True)
class FusionConfig:
    method: str = "lwv"
    patch_size: int = 5
    gain: float = 2.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ValueError(f"fusion method must be one of {FUSION_METHODS}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be an odd integer >= 1")
        if self.gain < 0:
            raise ValueError("gain must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class SegmentationReport:
    scores: dict            # atlas_id -> global NCC after registration
    selected: list          # atlas ids in selection order
    failures: dict          # atlas_id -> error message
    seconds: dict           # atlas_id -> registration wall time
    total_seconds: float
    k_requested: int
    fusion: FusionConfig
    warnings: list = field(default_factory=list)


# --------------------------------------------------------------------------
# registration and selection
# --------------------------------------------------------------------------

def _align_one(target, atlas, cfg, rigid_init):
    t0 = time.perf_counter()
    image = np.asarray(atlas.image, dtype=np.float64)
    rigid = None
    if rigid_init:
        rigid = rigid_register(image, target, seed=cfg.seed)
        image = np.clip(apply_rigid(image, rigid), 0.0, 1.0)
    result = cascade_register(image, target, cfg)
    if result.status != "ok":
        raise ValueError(f"registration status {result.status}")
    warped = warp_scalar(image, result.total_field)
    score = float(np.clip(global_ncc(target, warped), -1.0, 1.0))
    return AtlasAlignment(atlas.atlas_id, result.total_field, warped, score, rigid,
                          result.jacobian.folding_fraction, time.perf_counter() - t0)


def register_atlases_detailed(target, atlases, cfg=None, workers=1, rigid_init=False):
    """Like :func:`register_atlases` but also return ``{atlas_id: error}`` for failures."""
    cfg = cfg or RegistrationConfig()
    target = np.asarray(target, dtype=np.float64)
    atlases = list(atlases)
    if not atlases:
        raise ValueError("empty atlas list")
    for a in atlases:
        if np.shape(a.image) != target.shape:
            raise ValueError(f"atlas {a.atlas_id} dims {np.shape(a.image)} != target {target.shape}")
    threads = _kernels.get_threads()

    def run(atlas):
        # numba's thread count is per calling thread
        _kernels.set_threads(threads)
        try:
            return _align_one(target, atlas, cfg, rigid_init)
        except (ValueError, FloatingPointError) as exc:
            log.warning("registration of atlas %s failed: %s", atlas.atlas_id, exc)
            return exc

    if workers > 1 and len(atlases) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, atlases))
    else:
        outcomes = [run(a) for a in atlases]

    alignments, failures = [], {}
    for atlas, out in zip(atlases, outcomes):
        if isinstance(out, Exception):
            failures[atlas.atlas_id] = str(out)
        else:
            alignments.append(out)
    if not alignments:
        raise AllRegistrationsFailed(f"all {len(atlases)} atlas registrations failed")
    return alignments, failures


def register_atlases(target, atlases, cfg=None, workers=1, rigid_init=False):
    """Register every atlas onto ``target``; failed atlases are logged and dropped.

    Results keep the input order whatever ``workers`` is.
    """
    return register_atlases_detailed(target, atlases, cfg, workers, rigid_init)[0]


def select_atlases(alignments, k):
    """The ``k`` best alignments by score, ties broken by atlas id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    alignments = list(alignments)
    if not alignments:
        raise ValueError("no alignments to select from")
    ranked = sorted(alignments, key=lambda a: (-a.score, str(a.atlas_id)))
    return ranked[:k]


def propagate_labels(alignment, atlas):
    """Pull the atlas labels back through the alignment (nearest neighbour)."""
    if alignment.atlas_id != atlas.atlas_id:
        raise ValueError(f"alignment {alignment.atlas_id} does not belong to atlas {atlas.atlas_id}")
    labels = np.asarray(atlas.labels)
    if alignment.rigid is not None:
        labels = apply_rigid(labels, alignment.rigid)
    return warp_labels(labels, alignment.field)


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------

def _stack_labels(propagated):
    propagated = [np.asarray(p) for p in propagated]
    if not propagated:
        raise ValueError("nothing to fuse")
    shape = propagated[0].shape
    for p in propagated:
        if p.shape != shape:
            raise ValueError(f"dims mismatch: {p.shape} vs {shape}")
    return np.stack(propagated)


def _weighted_vote(stack, weights):
    """Argmax over labels of the summed weights; ties go to the smallest label."""
    labels = np.unique(stack)
    best = np.full(stack.shape[1:], labels[0], dtype=stack.dtype)
    best_score = np.full(stack.shape[1:], -np.inf)
    for lab in labels:
        score = np.zeros(stack.shape[1:])
        for k in range(stack.shape[0]):
            score += np.where(stack[k] == lab, weights[k], 0.0)
        better = score > best_score
        best[better] = lab
        best_score[better] = score[better]
    return best


def fuse_majority(propagated):
    """Per-voxel modal label; ties go to the smallest label."""
    stack = _stack_labels(propagated)
    return _weighted_vote(stack, np.ones(stack.shape[0]))


def lwv_weights(warped, target, cfg):
    """``max(|m|^g, eps)`` per atlas and voxel, ``m`` the local Pearson correlation.

    Flat windows have ``m = 0`` and so weigh ``eps`` (or 1 when ``g = 0``).
    """
    target = np.asarray(target, dtype=np.float64)
    out = np.empty((len(warped),) + target.shape)
    for k, w in enumerate(warped):
        m = np.abs(local_correlation(np.asarray(w, dtype=np.float64), target, cfg.patch_size))
        out[k] = np.maximum(m ** cfg.gain, cfg.epsilon)
    return out


def fuse_lwv(propagated, warped, target, cfg=None):
    """Local weighted voting."""
    cfg = cfg or FusionConfig()
    stack = _stack_labels(propagated)
    if len(warped) != stack.shape[0]:
        raise ValueError(f"{stack.shape[0]} label volumes but {len(warped)} warped images")
    if np.shape(target) != stack.shape[1:] or any(np.shape(w) != stack.shape[1:] for w in warped):
        raise ValueError("dims mismatch between labels, warped images and target")
    return _weighted_vote(stack, lwv_weights(warped, target, cfg))


def fuse(propagated, warped, target, cfg):
    if cfg.method == "majority":
        return fuse_majority(propagated)
    return fuse_lwv(propagated, warped, target, cfg)


def segment(target, atlases, reg_cfg=None, k=DEFAULT_K, fusion_cfg=None, workers=1,
            rigid_init=False):
    """Register, select, propagate and fuse. Returns ``(labels, SegmentationReport)``."""
    t0 = time.perf_counter()
    fusion_cfg = fusion_cfg or FusionConfig()
    target = np.asarray(target, dtype=np.float64)
    atlases = list(atlases)
    by_id = {a.atlas_id: a for a in atlases}
    if len(by_id) != len(atlases):
        raise ValueError("atlas ids must be unique")
    alignments, failures = register_atlases_detailed(target, atlases, reg_cfg, workers, rigid_init)
    warnings = []
    if k > len(alignments):
        warnings.append(f"k={k} exceeds the {len(alignments)} registered atlases; using all")
    chosen = select_atlases(alignments, k)
    propagated = [propagate_labels(a, by_id[a.atlas_id]) for a in chosen]
    labels = fuse(propagated, [a.warped_image for a in chosen], target, fusion_cfg)
    report = SegmentationReport(
        scores={a.atlas_id: a.score for a in alignments},
        selected=[a.atlas_id for a in chosen],
        failures=failures,
        seconds={a.atlas_id: a.seconds for a in alignments},
        total_seconds=time.perf_counter() - t0,
        k_requested=k,
        fusion=fusion_cfg,
        warnings=warnings,
    )
    return labels, report


# --------------------------------------------------------------------------
# atlas bank on disk: <bank>/<id>/image.nii[.gz], labels.nii[.gz], meta.txt
# --------------------------------------------------------------------------

def _find(d, stem):
    for name in (f"{stem}.nii.gz", f"{stem}.nii"):
        if (d / name).exists():
            return d / name
    return None


def read_meta(path):
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def load_bank(bank_dir):
    """Load every ``<bank>/<id>/`` atlas, sorted by id."""
    bank_dir = Path(bank_dir)
    if not bank_dir.is_dir():
        raise FileNotFoundError(f"atlas bank {bank_dir} is not a directory")
    atlases = []
    for d in sorted(p for p in bank_dir.iterdir() if p.is_dir()):
        image, labels = _find(d, "image"), _find(d, "labels")
        if image is None or labels is None:
            raise ValueError(f"invalid bank layout: {d} needs image.nii[.gz] and labels.nii[.gz]")
        meta = read_meta(d / "meta.txt") if (d / "meta.txt").exists() else {}
        atlases.append(Atlas(load_volume(image).data, load_labels(labels).data, d.name, meta))
    if not atlases:
        raise ValueError(f"invalid bank layout: no atlas directories in {bank_dir}")
    return atlases


def save_atlas(bank_dir, atlas):
    d = Path(bank_dir) / str(atlas.atlas_id)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(np.asarray(atlas.image, dtype=np.float32), d / "image.nii.gz")
    labels = np.asarray(atlas.labels)
    save_volume(labels.astype(np.uint8 if labels.max() < 256 else np.int16), d / "labels.nii.gz")
    if atlas.metadata:
        lines = [f"{k}={v}" for k, v in sorted(atlas.metadata.items())]
        (d / "meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
