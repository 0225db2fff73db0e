"""Synthetic pedestrian domains: identities, region-vector images, captions.

An image is four region vectors (head, upper body, lower body, foot). Each
region is the sum of a colour prototype and a garment prototype for that
body part plus a small identity-specific offset, then passed through the
camera transform (rotation plus a per-region offset), the domain's
affine transform, and Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .text import BODY_PARTS, COLORS, GARMENTS, TEMPLATE_SUBJECTS

FORMAT_VERSION = 1


class GeneratorConfigError(ValueError):
    pass


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_seen_domains: int = 3
    n_unseen_domains: int = 1
    ids_per_domain: int = 16
    images_per_id: int = 32
    test_ids_per_domain: int = 64
    test_images_per_id: int = 4
    disjoint_test_ids: bool = True
    region_dim: int = 16
    n_cameras: int = 4
    noise_sigma: float = 0.1
    identity_detail: float = 0.3
    domain_shift: float = 1.0
    domain_rotation: float = 0.6
    camera_rotation: float = 0.3
    camera_offset: float = 3.0
    attribute_skew: float = 1.5
    caption_noise: float = 0.0
    template: Literal["man", "neutral"] = "man"

    def validate_feasible(self) -> None:
        n_domains = self.n_seen_domains + self.n_unseen_domains
        if n_domains < 2:
            raise GeneratorConfigError("need at least 2 domains")
        if self.n_seen_domains < 1:
            raise GeneratorConfigError("need at least 1 seen domain")
        if self.ids_per_domain < 8 or self.test_ids_per_domain < 8:
            raise GeneratorConfigError("need at least 8 identities per domain")
        if self.images_per_id < 2 or self.test_images_per_id < 2:
            raise GeneratorConfigError("need at least 2 images per identity")
        if self.region_dim < 4:
            raise GeneratorConfigError("region dimension must be at least 4")
        if self.n_cameras < 2:
            raise GeneratorConfigError("need at least 2 cameras")
        if not 0.0 <= self.caption_noise <= 1.0:
            raise GeneratorConfigError("caption_noise must be a probability")
        combos = 1
        for part in BODY_PARTS:
            combos *= len(COLORS) * len(GARMENTS[part])
        total = n_domains * self.test_ids_per_domain + self.n_seen_domains * (
            self.ids_per_domain if self.disjoint_test_ids else 0
        )
        if total > combos:
            raise GeneratorConfigError(f"{total} identities exceed the {combos} distinct attribute combinations")


@dataclass(frozen=True)
class IdentityRecord:
    identity_id: int
    attributes: tuple[tuple[str, str], ...]  # (colour, garment) per body part, head to foot
    domain_id: int

    def __post_init__(self):
        if len(self.attributes) != 4:
            raise ValueError("an identity has exactly four body-part attributes")
        for part, (color, garment) in zip(BODY_PARTS, self.attributes):
            if color not in COLORS or garment not in GARMENTS[part]:
                raise ValueError(f"attribute {color} {garment} not in the {part} vocabulary")

    def phrase(self, part: str) -> str:
        color, garment = self.attributes[BODY_PARTS.index(part)]
        return f"{color} {garment}"


def caption(record: IdentityRecord, template: str = "man") -> str:
    subject = " ".join(TEMPLATE_SUBJECTS[template])
    return f"{subject} " + ", ".join(record.phrase(p) for p in BODY_PARTS) + "."


@dataclass(frozen=True)
class SyntheticImage:
    identity_id: int
    camera_id: int
    regions: np.ndarray  # (4, region_dim)
    noise_seed: int


@dataclass
class Split:
    regions: np.ndarray  # (n, 4, region_dim)
    identity_ids: np.ndarray
    camera_ids: np.ndarray
    noise_seeds: np.ndarray

    def __len__(self) -> int:
        return int(self.identity_ids.shape[0])

    def image(self, i: int) -> SyntheticImage:
        return SyntheticImage(int(self.identity_ids[i]), int(self.camera_ids[i]), self.regions[i], int(self.noise_seeds[i]))

    def subset(self, idx) -> "Split":
        return Split(self.regions[idx], self.identity_ids[idx], self.camera_ids[idx], self.noise_seeds[idx])

    @classmethod
    def empty(cls, region_dim: int) -> "Split":
        return cls(np.zeros((0, 4, region_dim)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))


@dataclass
class Domain:
    domain_id: int
    name: str
    unseen: bool
    identities: list[IdentityRecord]  # train identities
    test_identities: list[IdentityRecord]
    train: Split
    query: Split
    gallery: Split
    shift: np.ndarray
    rotation: np.ndarray
    camera_rotations: np.ndarray
    camera_offsets: np.ndarray
    captions: dict[int, str] = field(default_factory=dict)

    @property
    def train_identity_ids(self) -> list[int]:
        return [r.identity_id for r in self.identities]


@dataclass
class DomainStream:
    domains: list[Domain]
    config: GeneratorConfig
    seed: int

    def domain(self, domain_id: int) -> Domain:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(f"no domain {domain_id}")

    @property
    def seen(self) -> list[Domain]:
        return [d for d in self.domains if not d.unseen]

    @property
    def unseen(self) -> list[Domain]:
        return [d for d in self.domains if d.unseen]


def _orthogonal_near_identity(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    """Cayley transform of a scaled random skew-symmetric matrix."""
    a = rng.normal(size=(dim, dim))
    skew = (a - a.T) / np.sqrt(2 * dim)
    s = 0.5 * angle * skew
    eye = np.eye(dim)
    return np.linalg.solve(eye - s, eye + s)


class _World:
    """Attribute prototypes shared by every domain."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.color = {p: rng.normal(size=(len(COLORS), dim)) for p in BODY_PARTS}
        self.garment = {p: rng.normal(size=(len(GARMENTS[p]), dim)) for p in BODY_PARTS}

    def base(self, record: IdentityRecord) -> np.ndarray:
        rows = []
        for part, (color, garment) in zip(BODY_PARTS, record.attributes):
            rows.append(self.color[part][COLORS.index(color)] + self.garment[part][GARMENTS[part].index(garment)])
        return np.stack(rows)


def render(base: np.ndarray, camera: tuple[np.ndarray, np.ndarray], rotation: np.ndarray, shift: np.ndarray, sigma: float, noise_seed: int) -> np.ndarray:
    """Camera transform (rotation + per-region offset), then domain transform, then noise."""
    cam_rot, cam_off = camera
    noise = np.random.default_rng(noise_seed).normal(0.0, sigma, size=base.shape)
    return (base @ cam_rot.T + cam_off) @ rotation.T + shift + noise


def _draw_attributes(rng, color_weights, used: set) -> tuple[tuple[str, str], ...]:
    for _ in range(10_000):
        attrs = tuple(
            (COLORS[rng.choice(len(COLORS), p=color_weights[i])], GARMENTS[part][rng.integers(len(GARMENTS[part]))])
            for i, part in enumerate(BODY_PARTS)
        )
        if attrs not in used:
            used.add(attrs)
            return attrs
    raise GeneratorConfigError("could not draw a fresh attribute combination")


def _make_split(rng, world, records, details, n_images, cameras, rotation, shift, sigma, camera_of) -> Split:
    regions, pids, cams, seeds = [], [], [], []
    for rec in records:
        base = world.base(rec) + details[rec.identity_id]
        for j in range(n_images):
            cam = camera_of(j)
            seed = int(rng.integers(2**31 - 1))
            regions.append(render(base, (cameras[0][cam], cameras[1][cam]), rotation, shift, sigma, seed))
            pids.append(rec.identity_id)
            cams.append(cam)
            seeds.append(seed)
    return Split(np.array(regions), np.array(pids, np.int64), np.array(cams, np.int64), np.array(seeds, np.int64))


def _noisy_caption(rec: IdentityRecord, p: float, rng: np.random.Generator, template: str) -> str:
    if p > 0 and rng.random() < p:
        part = int(rng.integers(4))
        attrs = list(rec.attributes)
        color, garment = attrs[part]
        wrong = [c for c in COLORS if c != color]
        attrs[part] = (wrong[rng.integers(len(wrong))], garment)
        rec = IdentityRecord(rec.identity_id, tuple(attrs), rec.domain_id)
    return caption(rec, template)


def generate_stream(config: GeneratorConfig, seed: int) -> DomainStream:
    """Build a reproducible stream of seen domains followed by unseen ones."""
    config.validate_feasible()
    rng = np.random.default_rng(seed)
    dim = config.region_dim
    world = _World(rng, dim)
    n_domains = config.n_seen_domains + config.n_unseen_domains
    # orthonormal shift directions keep every pair of domains at least
    # domain_shift apart
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    used: set = set()
    next_id = 0
    domains: list[Domain] = []
    for t in range(n_domains):
        unseen = t >= config.n_seen_domains
        drng = np.random.default_rng(rng.integers(2**63 - 1))
        shift = config.domain_shift * q[:, t % dim] * np.sqrt(2.0)
        rotation = _orthogonal_near_identity(drng, dim, config.domain_rotation)
        cameras = np.stack([_orthogonal_near_identity(drng, dim, config.camera_rotation) for _ in range(config.n_cameras)])
        offsets = drng.normal(size=(config.n_cameras, 4, dim))
        offsets *= config.camera_offset / np.linalg.norm(offsets, axis=-1, keepdims=True)
        color_weights = []
        for _ in BODY_PARTS:
            logits = config.attribute_skew * drng.normal(size=len(COLORS))
            w = np.exp(logits - logits.max())
            color_weights.append(w / w.sum())

        def new_records(n):
            nonlocal next_id
            recs = []
            for _ in range(n):
                recs.append(IdentityRecord(next_id, _draw_attributes(drng, color_weights, used), t))
                next_id += 1
            return recs

        train_ids = [] if unseen else new_records(config.ids_per_domain)
        if unseen or config.disjoint_test_ids:
            test_ids = new_records(config.test_ids_per_domain)
        else:
            test_ids = train_ids
        details = {
            r.identity_id: drng.normal(0.0, config.identity_detail, size=(4, dim)) for r in train_ids + test_ids
        }
        args = ((cameras, offsets), rotation, shift, config.noise_sigma)
        if train_ids:
            train = _make_split(drng, world, train_ids, details, config.images_per_id, *args, lambda j: j % config.n_cameras)
        else:
            train = Split.empty(dim)
        test = _make_split(drng, world, test_ids, details, config.test_images_per_id, *args, lambda j: j % config.n_cameras)
        is_query = np.zeros(len(test), bool)
        is_query[:: config.test_images_per_id] = True
        captions = {r.identity_id: _noisy_caption(r, config.caption_noise, drng, config.template) for r in train_ids}
        domains.append(
            Domain(
                domain_id=t,
                name=f"{'unseen' if unseen else 'seen'}{t}",
                unseen=unseen,
                identities=train_ids,
                test_identities=test_ids,
                train=train,
                query=test.subset(is_query),
                gallery=test.subset(~is_query),
                shift=shift,
                rotation=rotation,
                camera_rotations=cameras,
                camera_offsets=offsets,
                captions=captions,
            )
        )
    return DomainStream(domains, config, seed)


def nearest_centroid_accuracy(split: Split) -> float:
    """Fraction of images whose nearest identity centroid (raw regions) is their own."""
    if len(split) == 0:
        raise ValueError("empty split")
    x = split.regions.reshape(len(split), -1)
    ids = np.unique(split.identity_ids)
    centroids = np.stack([x[split.identity_ids == i].mean(axis=0) for i in ids])
    d = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float(np.mean(ids[np.argmin(d, axis=1)] == split.identity_ids))


# -- export / import ---------------------------------------------------------

_SPLITS = ("train", "query", "gallery")


def _record_json(r: IdentityRecord) -> dict:
    return {"identity_id": r.identity_id, "attributes": [list(a) for a in r.attributes]}


def _record_from(d: dict, domain_id: int) -> IdentityRecord:
    return IdentityRecord(int(d["identity_id"]), tuple(tuple(a) for a in d["attributes"]), domain_id)


def save_stream(stream: DomainStream, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = []
    for d in stream.domains:
        splits = {}
        for name in _SPLITS:
            split: Split = getattr(d, name)
            fname = f"domain{d.domain_id}_{name}.npy"
            np.save(out / fname, split.regions.astype("<f8"), allow_pickle=False)
            splits[name] = {
                "file": fname,
                "identity_ids": split.identity_ids.tolist(),
                "camera_ids": split.camera_ids.tolist(),
                "noise_seeds": split.noise_seeds.tolist(),
            }
        domains.append(
            {
                "domain_id": d.domain_id,
                "name": d.name,
                "unseen": d.unseen,
                "identities": [_record_json(r) for r in d.identities],
                "test_identities": [_record_json(r) for r in d.test_identities],
                "captions": {str(k): v for k, v in d.captions.items()},
                "shift": d.shift.tolist(),
                "rotation": d.rotation.tolist(),
                "camera_rotations": d.camera_rotations.tolist(),
                "camera_offsets": d.camera_offsets.tolist(),
                "splits": splits,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": stream.seed,
        "config": stream.config.model_dump(),
        "domains": domains,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out


def load_stream(path: str | Path) -> DomainStream:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported stream format {manifest.get('format_version')}")
    domains = []
    for d in manifest["domains"]:
        t = int(d["domain_id"])
        splits = {}
        for name in _SPLITS:
            s = d["splits"][name]
            splits[name] = Split(
                np.load(root / s["file"], allow_pickle=False).astype(np.float64),
                np.array(s["identity_ids"], np.int64),
                np.array(s["camera_ids"], np.int64),
                np.array(s["noise_seeds"], np.int64),
            )
        domains.append(
            Domain(
                domain_id=t,
                name=d["name"],
                unseen=bool(d["unseen"]),
                identities=[_record_from(r, t) for r in d["identities"]],
                test_identities=[_record_from(r, t) for r in d["test_identities"]],
                train=splits["train"],
                query=splits["query"],
                gallery=splits["gallery"],
                shift=np.array(d["shift"]),
                rotation=np.array(d["rotation"]),
                camera_rotations=np.array(d["camera_rotations"]),
                camera_offsets=np.array(d["camera_offsets"]),
                captions={int(k): v for k, v in d["captions"].items()},
            )
        )
    return DomainStream(domains, GeneratorConfig(**manifest["config"]), int(manifest["seed"]))
