"""
Synthetic chest-phantom datasets: labeled source/target volumes reconstructed
through smooth/sharp kernels, unlabeled paired slices, preprocessing, fold
splits, and the on-disk dataset format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .recon import KernelSpec, radon, reconstruct

__all__ = [
    "PhantomConfig",
    "DataConfig",
    "LabeledSample",
    "PairedSample",
    "FoldSplit",
    "DatasetBundle",
    "generate_phantom",
    "synthesize_domain_pair",
    "preprocess",
    "build_datasets",
    "split_folds",
    "save_bundle",
    "load_bundle",
    "dataset_hash",
]

HU_CLIP_MIN = -1000.0
HU_CLIP_MAX = 300.0
TARGET_SPACING = 1.75  # mm, axial plane


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and intensity ranges for the analytic chest phantom."""

    grid_size: int = 128
    lesion_count: tuple[int, int] = (0, 4)
    lesion_hu: tuple[float, float] = (-600.0, -300.0)
    lesion_radius_frac: tuple[float, float] = (0.04, 0.09)
    noise_hu: float = 60.0
    body_hu: float = 0.0
    lung_hu: float = -800.0
    air_hu: float = -1000.0

    def __post_init__(self) -> None:
        if self.grid_size < 64:
            raise ValueError(
                f"grid_size must be >= 64 (FBP round-trip unreliable below), got {self.grid_size}"
            )
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lesion_count range {self.lesion_count}")


@dataclass
class LabeledSample:
    """One reconstructed slice with lesion/lung annotation."""

    image: np.ndarray  # [0, 1] after preprocessing
    lesion_mask: np.ndarray  # bool
    lung_mask: np.ndarray  # bool
    domain_tag: str  # "smooth" | "sharp"
    kernel: KernelSpec
    volume_id: int
    slice_index: int

    def validate(self) -> None:
        if self.domain_tag not in ("smooth", "sharp"):
            raise ValueError(f"domain_tag must be smooth|sharp, got {self.domain_tag}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if np.any(self.lesion_mask & ~self.lung_mask):
            raise ValueError("lesion mask must be contained in the lung mask")


@dataclass
class PairedSample:
    """Two reconstructions of one phantom slice differing only in kernel."""

    image_smooth: np.ndarray
    image_sharp: np.ndarray
    kernel_smooth: KernelSpec
    kernel_sharp: KernelSpec
    family: str
    pair_id: int
    # Never exposed to trainers; evaluation-only ground truth.
    lesion_mask_hidden: np.ndarray | None = None


@dataclass
class FoldSplit:
    """Deterministic partition of sample ids into k folds."""

    k: int
    assignments: dict[int, int]
    seed: int

    def fold_ids(self, fold: int) -> list[int]:
        return sorted(i for i, f in self.assignments.items() if f == fold)


@dataclass
class Volume:
    """Stack of slices sharing one body/lung layout."""

    slices: list[LabeledSample]

    @property
    def volume_id(self) -> int:
        return self.slices[0].volume_id


@dataclass
class DatasetBundle:
    """Everything one experiment consumes."""

    source_volumes: list[Volume]
    target_volumes: list[Volume]  # sharp reconstructions
    target_twin_volumes: list[Volume]  # smooth twins of the same phantoms
    paired_train: list[PairedSample]
    paired_test: list[PairedSample]
    config: "DataConfig"


@dataclass(frozen=True)
class DataConfig:
    """Dataset-build configuration (desk-scale defaults)."""

    grid_size: int = 64
    spacing: float = TARGET_SPACING
    n_angles: int = 180
    n_source_volumes: int = 50
    n_target_volumes: int = 20
    slices_per_volume: int = 8
    pairs_per_family: int = 20
    # Smooth member is always the pure ramp; the four sharp members mirror a
    # spread of kernel strengths with assorted exponents.  The exponents fall
    # as the gain rises so that effective sharpness (in-band boost under the
    # projector's point-spread function) increases monotonically with `a`.
    sharp_families: tuple[tuple[float, float], ...] = ((15.0, 4.0), (25.0, 3.0), (35.0, 2.0), (40.0, 1.0))
    pair_test_fraction: float = 0.3
    lesion_count: tuple[int, int] = (0, 4)
    pair_lesion_count: tuple[int, int] = (1, 4)
    lesion_free_pairs: bool = False
    # Per-volume texture-noise amplitude, drawn uniformly from this range
    # (dose/patient variation); a degenerate range pins it.
    noise_hu: tuple[float, float] = (5.0, 30.0)
    lesion_hu: tuple[float, float] = (-600.0, -300.0)
    lesion_radius_frac: tuple[float, float] = (0.04, 0.09)

    def phantom_config(
        self,
        lesion_count: tuple[int, int] | None = None,
        noise_hu: float | None = None,
    ) -> PhantomConfig:
        return PhantomConfig(
            grid_size=self.grid_size,
            lesion_count=self.lesion_count if lesion_count is None else lesion_count,
            lesion_hu=self.lesion_hu,
            lesion_radius_frac=self.lesion_radius_frac,
            noise_hu=self.noise_hu[0] if noise_hu is None else noise_hu,
        )


def _ellipse_mask(n: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


@dataclass
class _Layout:
    """Body/lung geometry shared by all slices of a volume."""

    body: tuple[float, float, float, float]
    lungs: list[tuple[float, float, float, float]]


def _sample_layout(rng: np.random.Generator, n: int) -> _Layout:
    cx = n / 2 + rng.uniform(-0.02, 0.02) * n
    cy = n / 2 + rng.uniform(-0.02, 0.02) * n
    body = (cx, cy, n * rng.uniform(0.40, 0.45), n * rng.uniform(0.32, 0.37))
    lungs = []
    for side in (-1.0, 1.0):
        lx = cx + side * n * rng.uniform(0.16, 0.20)
        ly = cy + rng.uniform(-0.015, 0.015) * n
        lungs.append((lx, ly, n * rng.uniform(0.11, 0.14), n * rng.uniform(0.22, 0.27)))
    return _Layout(body=body, lungs=lungs)


def _soft_blob(
    n: int, cx: float, cy: float, rx: float, ry: float, angle: float, edge: float = 1.2
) -> np.ndarray:
    """Anisotropic blob with a smooth (erf-like) edge; values in [0, 1]."""
    yy, xx = np.mgrid[0:n, 0:n]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    # signed distance from the unit contour, roughly in pixels
    scale = min(rx, ry)
    t = np.clip((r - 1.0) * scale / edge, -1.0, 1.0)
    return 0.5 * (1.0 - np.sin(t * np.pi / 2.0))


def generate_phantom(
    rng: np.random.Generator,
    config: PhantomConfig,
    layout: _Layout | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one chest-like slice in Hounsfield units.

    Body ellipse at ~0 HU over a -1000 HU air background, two lung ellipses
    at ~-800 HU, a configurable number of soft lesion blobs inside the lungs,
    plus additive Gaussian texture noise.

    Returns
    -------
    (hu_image, lesion_mask, lung_mask)
        Float HU image and boolean masks on the same grid.
    """
    n = config.grid_size
    if layout is None:
        layout = _sample_layout(rng, n)
    img = np.full((n, n), config.air_hu)
    body = _ellipse_mask(n, *layout.body)
    img[body] = config.body_hu
    lung_mask = np.zeros((n, n), dtype=bool)
    for lung in layout.lungs:
        m = _ellipse_mask(n, *lung)
        lung_mask |= m
    lung_mask &= body
    img[lung_mask] = config.lung_hu

    lesion_mask = np.zeros((n, n), dtype=bool)
    count = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
    for _ in range(count):
        lx, ly, lrx, lry = layout.lungs[int(rng.integers(len(layout.lungs)))]
        # place the center well inside the lung ellipse
        rho = np.sqrt(rng.uniform()) * 0.75
        phi = rng.uniform(0.0, 2.0 * np.pi)
        cx = lx + rho * lrx * np.cos(phi)
        cy = ly + rho * lry * np.sin(phi)
        r_base = n * rng.uniform(*config.lesion_radius_frac)
        rx = r_base * rng.uniform(0.75, 1.3)
        ry = r_base * rng.uniform(0.75, 1.3)
        blob = _soft_blob(n, cx, cy, rx, ry, rng.uniform(0.0, np.pi))
        blob_mask = (blob > 0.5) & lung_mask
        if not blob_mask.any():
            continue
        hu = rng.uniform(*config.lesion_hu)
        # blend the lesion over the lung parenchyma, confined to the lungs
        w = blob * lung_mask
        img = img + w * (hu - config.lung_hu) * (img == config.lung_hu)
        lesion_mask |= blob_mask
    img = img + rng.normal(0.0, config.noise_hu, size=(n, n)) * body
    return img, lesion_mask, lung_mask


def preprocess(
    volume: np.ndarray,
    spacing: float,
    lung_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Intensity-normalize (and optionally crop) an HU image or slice stack.

    Resamples the axial plane to 1.75 x 1.75 mm (an identity for data
    generated at that spacing), clips to [-1000, 300] HU, maps linearly to
    [0, 1], and crops to the lung-mask bounding box when a mask is supplied.
    Input already scaled to [0, 1] is passed through unchanged (this makes
    the operation idempotent).

    Parameters
    ----------
    volume : np.ndarray
        2D slice or 3D (slices, H, W) stack of finite HU values.
    spacing : float
        In-plane pixel size in mm, positive.
    lung_mask : np.ndarray, optional
        Boolean mask on the same grid; triggers bounding-box cropping.

    Returns
    -------
    np.ndarray
        Normalized image, values in [0, 1].
    """
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    vol = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(vol)):
        raise ValueError("volume contains non-finite values")
    if spacing != TARGET_SPACING:
        zoom = spacing / TARGET_SPACING
        factors = (1.0, zoom, zoom) if vol.ndim == 3 else (zoom, zoom)
        vol = ndimage.zoom(vol, factors, order=1)
        if lung_mask is not None:
            lung_mask = ndimage.zoom(lung_mask.astype(np.float64), factors, order=0) > 0.5
    already_normalized = vol.min() >= 0.0 and vol.max() <= 1.0
    if not already_normalized:
        vol = np.clip(vol, HU_CLIP_MIN, HU_CLIP_MAX)
        vol = (vol - HU_CLIP_MIN) / (HU_CLIP_MAX - HU_CLIP_MIN)
    if lung_mask is not None:
        sl = lung_bbox(lung_mask)
        vol = vol[..., sl[0], sl[1]]
    return vol


def lung_bbox(lung_mask: np.ndarray, margin: int = 2) -> tuple[slice, slice]:
    """Bounding-box slices of a lung mask with a safety margin."""
    if not lung_mask.any():
        raise ValueError("lung mask is empty")
    rows = np.where(lung_mask.any(axis=1))[0]
    cols = np.where(lung_mask.any(axis=0))[0]
    h, w = lung_mask.shape
    return (
        slice(max(rows[0] - margin, 0), min(rows[-1] + margin + 1, h)),
        slice(max(cols[0] - margin, 0), min(cols[-1] + margin + 1, w)),
    )


def synthesize_domain_pair(
    phantom: tuple[np.ndarray, np.ndarray, np.ndarray],
    smooth: KernelSpec,
    sharp: KernelSpec,
    n_angles: int = 180,
    spacing: float = TARGET_SPACING,
    family: str = "",
    pair_id: int = 0,
) -> PairedSample:
    """Reconstruct one phantom through both kernels of a pair.

    A single Radon transform feeds two ``reconstruct`` calls, so the two
    images differ only in the reconstruction kernel.  Masks live on the
    phantom grid and bypass reconstruction entirely.
    """
    if smooth.a > sharp.a:
        raise ValueError(
            f"pair kernels out of order: smooth a={smooth.a} must not exceed sharp a={sharp.a}"
        )
    hu_image, lesion_mask, lung_mask = phantom
    sino = radon(hu_image, n_angles, spacing=spacing)
    img_smooth = preprocess(reconstruct(sino, smooth), spacing, lung_mask=lung_mask)
    img_sharp = preprocess(reconstruct(sino, sharp), spacing, lung_mask=lung_mask)
    sl = lung_bbox(lung_mask)
    return PairedSample(
        image_smooth=img_smooth,
        image_sharp=img_sharp,
        kernel_smooth=smooth,
        kernel_sharp=sharp,
        family=family or f"a0-a{sharp.a:g}",
        pair_id=pair_id,
        lesion_mask_hidden=lesion_mask[sl[0], sl[1]],
    )


def _pad_to(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[-2:]
    th, tw = shape
    r0 = (th - h) // 2
    c0 = (tw - w) // 2
    out = np.zeros(img.shape[:-2] + shape, dtype=img.dtype)
    out[..., r0 : r0 + h, c0 : c0 + w] = img
    return out


def _round_up(x: int, multiple: int) -> int:
    return int(np.ceil(x / multiple) * multiple)


def _rng_for(seed: int, *key: object) -> np.random.Generator:
    digest = hashlib.sha256(repr((seed,) + key).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def build_datasets(config: DataConfig, rng: np.random.Generator | int) -> DatasetBundle:
    """Synthesize the full experiment corpus.

    Source volumes are reconstructed with the smooth kernel only; target test
    volumes with sharp kernels only (their smooth twins are kept separately
    for per-image paired evaluation); unlabeled pairs are split ~70/30 into
    train/test stratified by kernel-pair family.  All images share one
    dataset-wide spatial shape (lung bounding boxes padded to a multiple
    of 16).
    """
    if config.pairs_per_family < 2:
        raise ValueError("need at least 2 pairs per kernel-pair family")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(2**31))
    smooth = KernelSpec(0.0, 1.0)
    families = [KernelSpec(a, b) for a, b in config.sharp_families]
    fam_names = [f"a0-a{k.a:g}" for k in families]

    def _draw_noise(vol_rng: np.random.Generator) -> float:
        lo, hi = config.noise_hu
        return float(vol_rng.uniform(lo, hi))

    raw_source: list[tuple] = []
    for v in range(config.n_source_volumes):
        vol_rng = _rng_for(seed, "source", v)
        layout = _sample_layout(vol_rng, config.grid_size)
        pc = config.phantom_config(noise_hu=_draw_noise(vol_rng))
        raw_source.append(
            [generate_phantom(vol_rng, pc, layout) for _ in range(config.slices_per_volume)]
        )
    raw_target: list[tuple] = []
    for v in range(config.n_target_volumes):
        vol_rng = _rng_for(seed, "target", v)
        layout = _sample_layout(vol_rng, config.grid_size)
        pc = config.phantom_config(noise_hu=_draw_noise(vol_rng))
        raw_target.append(
            [generate_phantom(vol_rng, pc, layout) for _ in range(config.slices_per_volume)]
        )
    pair_lesions = (0, 0) if config.lesion_free_pairs else config.pair_lesion_count
    raw_pairs: list[tuple] = []
    for f, _ in enumerate(families):
        for j in range(config.pairs_per_family):
            p_rng = _rng_for(seed, "pair", f, j)
            pc = config.phantom_config(pair_lesions, noise_hu=_draw_noise(p_rng))
            raw_pairs.append((f, generate_phantom(p_rng, pc)))

    # one dataset-wide shape: max lung bbox, padded up to a multiple of 16
    boxes = [
        lung_bbox(ph[2])
        for vol in raw_source + raw_target
        for ph in vol[:1]
    ] + [lung_bbox(ph[2]) for _, ph in raw_pairs]
    max_h = max(sl[0].stop - sl[0].start for sl in boxes)
    max_w = max(sl[1].stop - sl[1].start for sl in boxes)
    shape = (_round_up(max_h, 16), _round_up(max_w, 16))

    def _labeled_volume(phantoms, kernel: KernelSpec, tag: str, vol_id: int) -> Volume:
        slices = []
        for s, (hu, lesion, lung) in enumerate(phantoms):
            sino = radon(hu, config.n_angles, spacing=config.spacing)
            img = preprocess(reconstruct(sino, kernel), config.spacing, lung_mask=lung)
            sl = lung_bbox(lung)
            slices.append(
                LabeledSample(
                    image=_pad_to(img, shape).astype(np.float32),
                    lesion_mask=_pad_to(lesion[sl[0], sl[1]], shape),
                    lung_mask=_pad_to(lung[sl[0], sl[1]], shape),
                    domain_tag=tag,
                    kernel=kernel,
                    volume_id=vol_id,
                    slice_index=s,
                )
            )
        return Volume(slices=slices)

    source_volumes = [
        _labeled_volume(phs, smooth, "smooth", v) for v, phs in enumerate(raw_source)
    ]
    target_volumes = []
    target_twin_volumes = []
    for v, phs in enumerate(raw_target):
        sharp = families[v % len(families)]
        sinos = [radon(hu, config.n_angles, spacing=config.spacing) for hu, _, _ in phs]
        for kernel, tag, dest in (
            (sharp, "sharp", target_volumes),
            (smooth, "smooth", target_twin_volumes),
        ):
            slices = []
            for s, ((hu, lesion, lung), sino) in enumerate(zip(phs, sinos)):
                img = preprocess(reconstruct(sino, kernel), config.spacing, lung_mask=lung)
                sl = lung_bbox(lung)
                slices.append(
                    LabeledSample(
                        image=_pad_to(img, shape).astype(np.float32),
                        lesion_mask=_pad_to(lesion[sl[0], sl[1]], shape),
                        lung_mask=_pad_to(lung[sl[0], sl[1]], shape),
                        domain_tag=tag,
                        kernel=kernel,
                        volume_id=v,
                        slice_index=s,
                    )
                )
            dest.append(Volume(slices=slices))

    pairs = []
    for pid, (f, phantom) in enumerate(raw_pairs):
        pair = synthesize_domain_pair(
            phantom,
            smooth,
            families[f],
            n_angles=config.n_angles,
            spacing=config.spacing,
            family=fam_names[f],
            pair_id=pid,
        )
        pair.image_smooth = _pad_to(pair.image_smooth, shape).astype(np.float32)
        pair.image_sharp = _pad_to(pair.image_sharp, shape).astype(np.float32)
        pair.lesion_mask_hidden = _pad_to(pair.lesion_mask_hidden, shape)
        pairs.append(pair)

    split_rng = _rng_for(seed, "pair-split")
    paired_train: list[PairedSample] = []
    paired_test: list[PairedSample] = []
    for name in fam_names:
        fam_pairs = [p for p in pairs if p.family == name]
        order = split_rng.permutation(len(fam_pairs))
        n_test = int(round(config.pair_test_fraction * len(fam_pairs)))
        test_idx = set(order[:n_test].tolist())
        for i, p in enumerate(fam_pairs):
            (paired_test if i in test_idx else paired_train).append(p)

    return DatasetBundle(
        source_volumes=source_volumes,
        target_volumes=target_volumes,
        target_twin_volumes=target_twin_volumes,
        paired_train=paired_train,
        paired_test=paired_test,
        config=config,
    )


def split_folds(dataset: list, k: int = 5, seed: int = 0) -> FoldSplit:
    """Partition sample indices into k deterministic folds of near-equal size."""
    if k <= 1:
        raise ValueError(f"fold count must be > 1, got {k}")
    n = len(dataset)
    if n < k:
        raise ValueError(f"dataset of size {n} cannot be split into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignments: dict[int, int] = {}
    for fold, chunk in enumerate(np.array_split(order, k)):
        for idx in chunk:
            assignments[int(idx)] = fold
    return FoldSplit(k=k, assignments=assignments, seed=seed)


# --------------------------------------------------------------------------
# On-disk format: one directory per dataset, each array a raw little-endian
# float32 file plus a JSON manifest describing shapes and linkage.
# --------------------------------------------------------------------------


def _write_raw(path: Path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_raw(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape)


def save_bundle(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    """Write a dataset bundle to disk; returns the directory path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format": "kerneladapt-dataset-v1",
        "spacing": bundle.config.spacing,
        "config": asdict(bundle.config),
        "samples": [],
    }

    def _dump_labeled(sample: LabeledSample, stem: str) -> dict:
        _write_raw(out / f"{stem}.raw", sample.image)
        _write_raw(out / f"{stem}_lesion.raw", sample.lesion_mask.astype(np.float32))
        _write_raw(out / f"{stem}_lung.raw", sample.lung_mask.astype(np.float32))
        return {
            "kind": "labeled",
            "image": f"{stem}.raw",
            "shape": list(sample.image.shape),
            "spacing": bundle.config.spacing,
            "domain_tag": sample.domain_tag,
            "kernel": {"a": sample.kernel.a, "b": sample.kernel.b},
            "lesion_mask": f"{stem}_lesion.raw",
            "lung_mask": f"{stem}_lung.raw",
            "volume_id": sample.volume_id,
            "slice_index": sample.slice_index,
        }

    for group, volumes in (
        ("source", bundle.source_volumes),
        ("target", bundle.target_volumes),
        ("target_twin", bundle.target_twin_volumes),
    ):
        for vol in volumes:
            for s in vol.slices:
                stem = f"{group}_v{s.volume_id:04d}_s{s.slice_index:02d}"
                entry = _dump_labeled(s, stem)
                entry["group"] = group
                manifest["samples"].append(entry)

    for group, pairs in (("pair_train", bundle.paired_train), ("pair_test", bundle.paired_test)):
        for p in pairs:
            stem = f"{group}_p{p.pair_id:04d}"
            _write_raw(out / f"{stem}_smooth.raw", p.image_smooth)
            _write_raw(out / f"{stem}_sharp.raw", p.image_sharp)
            entry = {
                "kind": "paired",
                "group": group,
                "image_smooth": f"{stem}_smooth.raw",
                "image_sharp": f"{stem}_sharp.raw",
                "shape": list(p.image_smooth.shape),
                "spacing": bundle.config.spacing,
                "kernel_smooth": {"a": p.kernel_smooth.a, "b": p.kernel_smooth.b},
                "kernel_sharp": {"a": p.kernel_sharp.a, "b": p.kernel_sharp.b},
                "family": p.family,
                "pair_id": p.pair_id,
            }
            if p.lesion_mask_hidden is not None:
                _write_raw(out / f"{stem}_lesion.raw", p.lesion_mask_hidden.astype(np.float32))
                entry["lesion_mask_hidden"] = f"{stem}_lesion.raw"
            manifest["samples"].append(entry)

    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return out


def load_bundle(dataset_dir: str | Path) -> DatasetBundle:
    """Read a dataset bundle previously written by ``save_bundle``."""
    root = Path(dataset_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg_dict = dict(manifest["config"])
    for key in ("sharp_families",):
        cfg_dict[key] = tuple(tuple(x) for x in cfg_dict[key])
    for key in ("lesion_count", "pair_lesion_count", "lesion_hu", "lesion_radius_frac", "noise_hu"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = DataConfig(**cfg_dict)

    groups: dict[str, dict[int, list[LabeledSample]]] = {
        "source": {},
        "target": {},
        "target_twin": {},
    }
    pair_groups: dict[str, list[PairedSample]] = {"pair_train": [], "pair_test": []}
    for entry in manifest["samples"]:
        shape = tuple(entry["shape"])
        if entry["kind"] == "labeled":
            sample = LabeledSample(
                image=_read_raw(root / entry["image"], shape),
                lesion_mask=_read_raw(root / entry["lesion_mask"], shape) > 0.5,
                lung_mask=_read_raw(root / entry["lung_mask"], shape) > 0.5,
                domain_tag=entry["domain_tag"],
                kernel=KernelSpec(**entry["kernel"]),
                volume_id=entry["volume_id"],
                slice_index=entry["slice_index"],
            )
            groups[entry["group"]].setdefault(entry["volume_id"], []).append(sample)
        else:
            mask_file = entry.get("lesion_mask_hidden")
            pair_groups[entry["group"]].append(
                PairedSample(
                    image_smooth=_read_raw(root / entry["image_smooth"], shape),
                    image_sharp=_read_raw(root / entry["image_sharp"], shape),
                    kernel_smooth=KernelSpec(**entry["kernel_smooth"]),
                    kernel_sharp=KernelSpec(**entry["kernel_sharp"]),
                    family=entry["family"],
                    pair_id=entry["pair_id"],
                    lesion_mask_hidden=None
                    if mask_file is None
                    else _read_raw(root / mask_file, shape) > 0.5,
                )
            )

    def _volumes(group: str) -> list[Volume]:
        vols = []
        for vid in sorted(groups[group]):
            slices = sorted(groups[group][vid], key=lambda s: s.slice_index)
            vols.append(Volume(slices=slices))
        return vols

    for key in pair_groups:
        pair_groups[key].sort(key=lambda p: p.pair_id)
    return DatasetBundle(
        source_volumes=_volumes("source"),
        target_volumes=_volumes("target"),
        target_twin_volumes=_volumes("target_twin"),
        paired_train=pair_groups["pair_train"],
        paired_test=pair_groups["pair_test"],
        config=config,
    )


def dataset_hash(dataset_dir: str | Path) -> str:
    """SHA-256 over the manifest and all raw arrays (traceability id)."""
    root = Path(dataset_dir)
    digest = hashlib.sha256()
    for path in sorted(root.iterdir()):
        if path.suffix == ".raw" or path.name == "manifest.json":
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
