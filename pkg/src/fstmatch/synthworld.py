"""A synthetic fake/source/target universe with known ground truth.

Every image is an L x L grid of D-dim feature cells.  Identities own a
persistent signature on the face and background cells, laid on the coarse
compression lattice so that quantisation keeps it intact.  The boundary ring
between face and background carries no identity signal (zero plus noise).  A fake
copies its background from the source image and its face from the target
image (``face_from="target"``, mirrored by ``"source"``), and its boundary is
the average of both plus a fixed low-amplitude artifact pattern that the
coarse quantiser rounds away.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import SeededRng

LEVELS = ("c23", "c40")


class WorldConfigError(ValueError):
    pass


class CompositionError(ValueError):
    pass


class CompressionStateError(ValueError):
    pass


def _ring(L: int, lo: int, hi: int) -> list[int]:
    """Row-major indices of the square [lo, hi) x [lo, hi)."""
    return [r * L + c for r in range(lo, hi) for c in range(lo, hi)]


def _margin(L: int) -> int:
    # leaves one boundary ring plus at least one background ring; needs L >= 5
    return max(2, L // 4)


def default_face_region(L: int) -> list[int]:
    q = _margin(L)
    return _ring(L, q, L - q)


def default_boundary_region(L: int) -> list[int]:
    q = _margin(L)
    face = set(_ring(L, q, L - q))
    return [i for i in _ring(L, q - 1, L - q + 1) if i not in face]


@dataclass
class WorldConfig:
    L: int = 8
    D: int = 4
    n_identities: int = 32
    face_region: list[int] | None = None
    boundary_region: list[int] | None = None
    identity_amplitude: float = 0.4
    artifact_amplitude: float = 0.12
    noise_sigma: float = 0.02
    quant_step_c23: float = 0.2
    quant_step_c40: float = 0.4
    face_from: str = "target"
    max_pairs: int | None = None
    frames_per_clip: int = 2
    real_train_clips: int = 4
    real_test_clips: int = 2
    fake_train_clips: int = 1
    fake_test_clips: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.face_region is None:
            self.face_region = default_face_region(self.L)
        if self.boundary_region is None:
            self.boundary_region = default_boundary_region(self.L)
        self.face_region = sorted(int(i) for i in self.face_region)
        self.boundary_region = sorted(int(i) for i in self.boundary_region)

    @property
    def n_grids(self) -> int:
        return self.L * self.L

    @property
    def background_region(self) -> list[int]:
        used = set(self.face_region) | set(self.boundary_region)
        return [i for i in range(self.n_grids) if i not in used]

    def quant_step(self, level: str) -> float:
        if level not in LEVELS:
            raise ValueError(f"unknown compression level {level!r}")
        return self.quant_step_c23 if level == "c23" else self.quant_step_c40

    def validate(self) -> None:
        face, boundary = set(self.face_region), set(self.boundary_region)
        n = self.n_grids
        if self.L < 2 or self.D < 1:
            raise WorldConfigError("need L >= 2 and D >= 1")
        if self.n_identities < 4:
            raise WorldConfigError("need at least 4 identities")
        if not face or not boundary:
            raise WorldConfigError("face and boundary regions must be non-empty")
        if face & boundary:
            raise WorldConfigError(f"face and boundary regions overlap at {sorted(face & boundary)}")
        if not (face | boundary) < set(range(n)):
            raise WorldConfigError("face and boundary must leave some background grids")
        if max(face | boundary) >= n or min(face | boundary) < 0:
            raise WorldConfigError("region index outside the grid")
        if not self.artifact_amplitude < self.quant_step_c40 / 2 < self.identity_amplitude:
            raise WorldConfigError("need artifact_amplitude < quant_step_c40/2 < identity_amplitude")
        if self.face_from not in ("target", "source"):
            raise WorldConfigError("face_from must be 'target' or 'source'")


@dataclass(eq=False)
class ImageSample:
    grids: np.ndarray
    role: str  # "real" | "fake"
    source_id: int
    target_id: int
    own_id: int
    compression: str = "raw"
    video_group: int = 0
    sample_id: str = ""

    def __post_init__(self):
        if self.role == "real" and not (self.source_id == self.target_id == self.own_id):
            raise ValueError("a real image has one identity")
        if self.role == "fake" and self.source_id == self.target_id:
            raise ValueError("a fake needs distinct source and target identities")

    @property
    def label(self) -> int:
        """Detection label: 1 for fake, 0 for real."""
        return int(self.role == "fake")

    @property
    def flat(self) -> np.ndarray:
        return self.grids.ravel()


@dataclass(eq=False)
class FstTriple:
    fake: ImageSample
    source: ImageSample
    target: ImageSample


@dataclass(eq=False)
class World:
    config: WorldConfig
    signatures: np.ndarray  # (n_identities, L*L, D) clean identity patterns
    base: np.ndarray  # (L*L, D) identity-free content of the boundary ring (zero)
    artifact: np.ndarray  # (L*L, D), zero off the boundary region
    train_triples: list[FstTriple] = field(default_factory=list)
    test_triples: list[FstTriple] = field(default_factory=list)
    train_reals: list[ImageSample] = field(default_factory=list)
    test_reals: list[ImageSample] = field(default_factory=list)

    def clean_image(self, identity: int) -> np.ndarray:
        return self.signatures[identity]

    def reals_of(self, identity: int, split: str = "train") -> list[ImageSample]:
        pool = self.train_reals if split == "train" else self.test_reals
        return [s for s in pool if s.own_id == identity]

    def fakes(self, split: str = "train") -> list[ImageSample]:
        triples = self.train_triples if split == "train" else self.test_triples
        return [tr.fake for tr in triples]

    def samples(self, split: str = "train") -> list[ImageSample]:
        pool = self.train_reals if split == "train" else self.test_reals
        return self.fakes(split) + list(pool)

    def nearest_signature(self, sample: ImageSample, region=None) -> int:
        region = self.config.face_region + self.config.background_region if region is None else list(region)
        d = ((self.signatures[:, region, :] - sample.grids[None, region, :]) ** 2).sum(axis=(1, 2))
        return int(np.argmin(d))


def _lattice_pattern(gen, shape, amplitude: float, step: float) -> np.ndarray:
    m = max(1, int(round(amplitude / step)))
    return step * gen.integers(-m, m + 1, size=shape).astype(np.float64)


def compose_fake(source: ImageSample, target: ImageSample, config: WorldConfig,
                 artifact: np.ndarray, video_group: int = 0, sample_id: str = "") -> ImageSample:
    """Splice a fake from two raw real images (see module docstring)."""
    if source.role != "real" or target.role != "real":
        raise CompositionError("fakes are composed from real images")
    if source.compression != "raw" or target.compression != "raw":
        raise CompositionError("fakes are composed from raw images")
    if source.own_id == target.own_id:
        raise CompositionError(f"source and target share identity {source.own_id}")
    face_donor, bg_donor = (target, source) if config.face_from == "target" else (source, target)
    grids = bg_donor.grids.copy()
    grids[config.face_region] = face_donor.grids[config.face_region]
    b = config.boundary_region
    grids[b] = 0.5 * (source.grids[b] + target.grids[b]) + artifact[b]
    return ImageSample(grids, "fake", source.own_id, target.own_id, face_donor.own_id,
                       "raw", video_group, sample_id)


def quantize(x: np.ndarray, step: float) -> np.ndarray:
    if step <= 0:
        return np.array(x, dtype=np.float64)
    return np.round(np.asarray(x) / step) * step


def compress(image: ImageSample, level: str, config: WorldConfig) -> ImageSample:
    """Quantise every feature to the nearest multiple of the level's step."""
    if image.compression != "raw":
        raise CompressionStateError(f"image {image.sample_id!r} is already {image.compression}")
    grids = quantize(image.grids, config.quant_step(level))
    return replace(image, grids=grids, compression=level,
                   sample_id=f"{image.sample_id}@{level}" if image.sample_id else "")


def gen_world(config: WorldConfig) -> World:
    config.validate()
    rng = SeededRng(config.seed, 7001)
    gen = rng.generator(0)
    L2, D = config.n_grids, config.D
    step = config.quant_step_c40
    identity_cells = config.face_region + config.background_region

    signatures = np.zeros((config.n_identities, L2, D))
    signatures[:, identity_cells, :] = _lattice_pattern(
        gen, (config.n_identities, len(identity_cells), D), config.identity_amplitude, step)
    base = np.zeros((L2, D))
    artifact = np.zeros((L2, D))
    nb = len(config.boundary_region)
    signs = gen.choice([-1.0, 1.0], size=(nb, D))
    artifact[config.boundary_region] = config.artifact_amplitude * signs * gen.uniform(0.5, 1.0, size=(nb, D))

    world = World(config, signatures, base, artifact)
    noise_gen = rng.generator(1)
    group = itertools.count()

    def real_frame(identity: int, vg: int, sid: str) -> ImageSample:
        clean = signatures[identity].copy()
        clean[config.boundary_region] = base[config.boundary_region]
        grids = clean + config.noise_sigma * noise_gen.standard_normal((L2, D))
        return ImageSample(grids, "real", identity, identity, identity, "raw", vg, sid)

    for identity in range(config.n_identities):
        for split, clips in (("train", config.real_train_clips), ("test", config.real_test_clips)):
            pool = world.train_reals if split == "train" else world.test_reals
            for clip in range(clips):
                vg = next(group)
                for frame in range(config.frames_per_clip):
                    pool.append(real_frame(identity, vg, f"r{identity}-{split}-{clip}-{frame}"))

    pairs = list(itertools.permutations(range(config.n_identities), 2))
    if config.max_pairs is not None and config.max_pairs < len(pairs):
        chosen = rng.generator(2).choice(len(pairs), size=config.max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]
    pick_gen = rng.generator(3)
    for s, t in pairs:
        for split, clips in (("train", config.fake_train_clips), ("test", config.fake_test_clips)):
            out = world.train_triples if split == "train" else world.test_triples
            src_pool, tgt_pool = world.reals_of(s, split), world.reals_of(t, split)
            for clip in range(clips):
                vg = next(group)
                for frame in range(config.frames_per_clip):
                    src = src_pool[pick_gen.integers(len(src_pool))]
                    tgt = tgt_pool[pick_gen.integers(len(tgt_pool))]
                    fake = compose_fake(src, tgt, config, artifact, vg, f"f{s}-{t}-{split}-{clip}-{frame}")
                    out.append(FstTriple(fake, src, tgt))
    return world


def signature_separation(world: World, n_draws: int = 200) -> tuple[float, float]:
    """Monte Carlo mean distance between two distinct identities' noisy frames,
    returned next to ``4 * noise_sigma`` for comparison."""
    cfg = world.config
    gen = SeededRng(cfg.seed, 7002).generator(0)
    dists = []
    for _ in range(n_draws):
        a, b = gen.choice(cfg.n_identities, size=2, replace=False)
        xa = world.signatures[a] + cfg.noise_sigma * gen.standard_normal(world.signatures[a].shape)
        xb = world.signatures[b] + cfg.noise_sigma * gen.standard_normal(world.signatures[b].shape)
        dists.append(np.linalg.norm(xa - xb))
    return float(np.mean(dists)), 4 * cfg.noise_sigma


@dataclass
class PairedSplit:
    fakes: list[ImageSample]
    reals: list[ImageSample]
    identities: list[int]

    @property
    def samples(self) -> list[ImageSample]:
        return self.fakes + self.reals


def build_paired_unpaired(world: World, n_pair_identities: int, real_ratio: float = 1.0,
                          split: str = "train") -> tuple[PairedSplit, PairedSplit]:
    """Training sets with and without the fake/source/target correspondence.

    Both share the fakes among the first ``n_pair_identities`` identities.
    Paired reals are those fakes' own source and target frames; unpaired reals
    come from the next ``n_pair_identities`` identities.  Both real sets hold
    ``round(real_ratio * #fakes)`` frames, cycling the pool when it is short.
    """
    if world.config.n_identities < 2 * n_pair_identities:
        raise WorldConfigError(
            f"{world.config.n_identities} identities cannot host two disjoint groups of {n_pair_identities}")
    ids = set(range(n_pair_identities))
    triples = world.train_triples if split == "train" else world.test_triples
    chosen = [tr for tr in triples if tr.fake.source_id in ids and tr.fake.target_id in ids]
    fakes = [tr.fake for tr in chosen]
    n_reals = int(round(real_ratio * len(fakes)))

    paired_pool, seen = [], set()
    for tr in chosen:
        for s in (tr.source, tr.target):
            if id(s) not in seen:
                seen.add(id(s))
                paired_pool.append(s)
    other = range(n_pair_identities, 2 * n_pair_identities)
    per_identity = [world.reals_of(i, split) for i in other]
    # interleave identities so short draws still cover all of them
    unpaired_pool = [s for group in itertools.zip_longest(*per_identity) for s in group if s is not None]

    def take(pool):
        if not pool:
            raise WorldConfigError("no real frames to draw from")
        return [pool[i % len(pool)] for i in range(n_reals)]

    return (PairedSplit(fakes, take(paired_pool), sorted(ids)),
            PairedSplit(list(fakes), take(unpaired_pool), sorted(ids)))


# --- dataset export / import ---------------------------------------------------------

MANIFEST_FIELDS = ("sample_id", "role", "source_id", "target_id", "own_id", "compression", "video_group")


def export_samples(samples, directory, config: WorldConfig | None = None) -> Path:
    """Write ``grids.csv`` (one row per cell feature) and ``manifest.csv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for s in samples:
            w.writerow([s.sample_id, s.role, s.source_id, s.target_id, s.own_id, s.compression, s.video_group])
    with open(out / "grids.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample_id", "grid_index", "feature_index", "value"))
        for s in samples:
            for g in range(s.grids.shape[0]):
                for f in range(s.grids.shape[1]):
                    w.writerow((s.sample_id, g, f, repr(float(s.grids[g, f]))))
    if config is not None:
        (out / "world.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    return out


def import_samples(directory) -> list[ImageSample]:
    src = Path(directory)
    cells: dict[str, dict[tuple[int, int], float]] = {}
    with open(src / "grids.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cells.setdefault(row["sample_id"], {})[(int(row["grid_index"]), int(row["feature_index"]))] = \
                float(row["value"])
    samples = []
    with open(src / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["sample_id"]
            entries = cells.get(sid, {})
            if not entries:
                raise ValueError(f"sample {sid!r} has no grid rows")
            n = max(g for g, _ in entries) + 1
            d = max(f for _, f in entries) + 1
            grids = np.zeros((n, d))
            for (g, f), v in entries.items():
                grids[g, f] = v
            samples.append(ImageSample(grids, row["role"], int(row["source_id"]), int(row["target_id"]),
                                       int(row["own_id"]), row["compression"], int(row["video_group"]), sid))
    return samples
