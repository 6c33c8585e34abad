"""Synthetic pelvic-like phantoms standing in for clinical planning data.

Each case is a 2-D slice: a noisy elliptical body, an elliptical PTV, a few
elliptical OARs kept disjoint from the PTV, and an analytic dose::

    dose = clip(1 - c * dist(v, PTV), 0, 1) * body(v) * (1 - s * oars(v))

where ``dist`` is the Euclidean distance to the nearest PTV pixel in units of
the image width. Everything is a pure function of ``(spec.seed, index)``.

The two built-in domain specs differ in PTV placement and size priors, which
produces the source/target domain gap.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import pfmt
from .errors import ConfigError, ContractError, GenerationError

MAX_RETRIES = 100


@dataclass(frozen=True)
class DomainSpec:
    name: str
    seed: int
    image_size: int = 32
    ptv_center: tuple[float, float] = (0.0, 0.0)  # (row, col) offset from image centre, fraction of size
    ptv_jitter: float = 0.03
    ptv_radius: tuple[float, float] = (0.10, 0.15)  # semi-axis range, fraction of size
    oar_count: tuple[int, int] = (2, 3)
    oar_radius: tuple[float, float] = (0.05, 0.09)
    falloff: tuple[float, float] = (2.0, 3.5)  # c, per unit image width
    sparing: tuple[float, float] = (0.1, 0.3)  # s, OAR dose dip

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def builtin_spec(name: str, seed: int | None = None, image_size: int = 32) -> DomainSpec:
    """The rectum-like source and cervix-like target domains."""
    if name == "source-like":
        return DomainSpec(
            name=name,
            seed=101 if seed is None else seed,
            image_size=image_size,
            ptv_center=(0.12, 0.0),
            ptv_radius=(0.09, 0.13),
            falloff=(2.5, 3.5),
        )
    if name == "target-like":
        return DomainSpec(
            name=name,
            seed=202 if seed is None else seed,
            image_size=image_size,
            ptv_center=(-0.02, 0.0),
            ptv_radius=(0.14, 0.19),
            falloff=(2.0, 3.0),
        )
    raise ConfigError(f"unknown domain spec {name!r} (expected 'source-like' or 'target-like')")


SPEC_NAMES = ("source-like", "target-like")


@dataclass
class Case:
    id: str
    ct: np.ndarray  # 1 x H x W, [0, 1]
    ptv: np.ndarray  # 1 x H x W, {0, 1}
    oars: np.ndarray  # 1 x H x W, {0, 1}
    dose: np.ndarray  # 1 x H x W, [0, 1]
    body: np.ndarray | None = None  # 1 x H x W, {0, 1}; not persisted

    def inputs(self) -> np.ndarray:
        """Network input ``3 x H x W``: CT, PTV mask, OARs mask."""
        return np.concatenate([self.ct, self.ptv, self.oars], axis=0)


def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size - 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_case(spec: DomainSpec, index: int) -> Case:
    n = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    yy, xx = _grid(n)

    body = _ellipse(yy, xx, rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(0.32, 0.40), rng.uniform(0.40, 0.46))

    for _ in range(MAX_RETRIES):
        cy = spec.ptv_center[0] + rng.uniform(-spec.ptv_jitter, spec.ptv_jitter)
        cx = spec.ptv_center[1] + rng.uniform(-spec.ptv_jitter, spec.ptv_jitter)
        ptv = _ellipse(yy, xx, cy, cx, rng.uniform(*spec.ptv_radius), rng.uniform(*spec.ptv_radius), rng.uniform(0, np.pi))
        if ptv.any() and not (ptv & ~body).any():
            break
    else:
        raise GenerationError(f"{spec.name}[{index}]: could not place PTV inside body")

    # one-pixel clearance between OARs and PTV
    ptv_halo = distance_transform_edt(~ptv) <= 1.5
    oars = np.zeros_like(ptv)
    for _ in range(int(rng.integers(spec.oar_count[0], spec.oar_count[1] + 1))):
        for _ in range(MAX_RETRIES):
            organ = _ellipse(
                yy, xx,
                rng.uniform(-0.3, 0.3), rng.uniform(-0.35, 0.35),
                rng.uniform(*spec.oar_radius), rng.uniform(*spec.oar_radius),
                rng.uniform(0, np.pi),
            )
            if organ.any() and not (organ & (ptv_halo | ~body)).any():
                oars |= organ
                break
        else:
            raise GenerationError(f"{spec.name}[{index}]: could not place an OAR disjoint from the PTV")

    ct = np.where(body, 0.45, 0.02) + rng.normal(0.0, 0.02, size=(n, n))
    ct = np.where(oars, ct - 0.1, ct)
    ct = np.where(ptv, ct + 0.05, ct)
    ct = np.clip(ct, 0.0, 1.0)

    c = rng.uniform(*spec.falloff)
    s = rng.uniform(*spec.sparing)
    dist = distance_transform_edt(~ptv) / n
    dose = np.clip(1.0 - c * dist, 0.0, 1.0) * body * (1.0 - s * oars)

    as_map = lambda a: np.asarray(a, dtype=np.float64)[None]  # noqa: E731
    return Case(
        id=f"case_{index:04d}",
        ct=as_map(ct),
        ptv=as_map(ptv),
        oars=as_map(oars),
        dose=as_map(dose),
        body=as_map(body),
    )


CASE_FILES = ("ct", "ptv", "oars", "dose")


def case_fingerprint(spec: DomainSpec, case: Case) -> str:
    h = hashlib.sha256(spec.fingerprint().encode())
    for name in CASE_FILES:
        h.update(pfmt.encode(getattr(case, name)))
    return h.hexdigest()[:16]


def generate_dataset(spec: DomainSpec, n: int, out_dir, start: int = 0) -> str:
    """Write ``n`` cases plus ``manifest.csv``; returns the manifest path."""
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for index in range(start, start + n):
        case = generate_case(spec, index)
        case_dir = os.path.join(out_dir, case.id)
        os.makedirs(case_dir, exist_ok=True)
        for name in CASE_FILES:
            pfmt.write_tensor(os.path.join(case_dir, f"{name}.pfmt"), getattr(case, name))
        rows.append((case.id, case.id, spec.name, case_fingerprint(spec, case)))
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "path", "domain", "seed_fingerprint"])
        writer.writerows(rows)
    return path


def load_dataset(data_dir) -> list[Case]:
    manifest = os.path.join(data_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise ConfigError(f"no manifest.csv in {data_dir}")
    cases = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            case_dir = os.path.join(data_dir, row["path"])
            arrays = {name: pfmt.read_array(os.path.join(case_dir, f"{name}.pfmt")) for name in CASE_FILES}
            cases.append(Case(id=row["id"], **arrays))
    if not cases:
        raise ConfigError(f"dataset {data_dir} is empty")
    return cases


def make_cases(spec: DomainSpec, n: int, start: int = 0) -> list[Case]:
    """In-memory equivalent of :func:`generate_dataset`."""
    return [generate_case(spec, i) for i in range(start, start + n)]
