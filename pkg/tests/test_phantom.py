import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from pfmdose import pfmt
from pfmdose.errors import ConfigError, ContractError, FormatError
from pfmdose.phantom import (
    SPEC_NAMES,
    builtin_spec,
    case_fingerprint,
    generate_case,
    generate_dataset,
    load_dataset,
    make_cases,
)
from pfmdose.tensor import Tensor


@pytest.fixture(scope="module", params=SPEC_NAMES)
def sweep(request):
    spec = builtin_spec(request.param)
    return spec, make_cases(spec, 200)


# -- case invariants --------------------------------------------------------------

def test_case_invariants(sweep):
    _, cases = sweep
    for c in cases:
        ptv, oars, body = c.ptv[0] > 0.5, c.oars[0] > 0.5, c.body[0] > 0.5
        assert ptv.any()
        assert not (ptv & oars).any()
        assert c.dose.min() >= 0.0 and c.dose.max() <= 1.0
        assert c.ct.min() >= 0.0 and c.ct.max() <= 1.0
        assert (c.dose[0][~body] == 0.0).all()
        assert (c.dose[0][ptv] == 1.0).all()
        assert set(np.unique(c.ptv)) <= {0.0, 1.0} and set(np.unique(c.oars)) <= {0.0, 1.0}
        assert c.inputs().shape == (3, 32, 32)


def test_dose_falls_off_along_rays(sweep):
    """Walking outward from the PTV centroid, dose never increases (OAR dips excluded)."""
    _, cases = sweep
    for c in cases[:50]:
        ptv = c.ptv[0] > 0.5
        cy, cx = np.argwhere(ptv).mean(axis=0)
        n = ptv.shape[0]
        undipped = np.where(c.oars[0] > 0.5, np.nan, c.dose[0])
        for angle in np.linspace(0, 2 * np.pi, 16, endpoint=False):
            prev, left_ptv = 1.0, False
            for r in np.arange(0, n, 0.5):
                i, j = int(round(cy + r * np.sin(angle))), int(round(cx + r * np.cos(angle)))
                if not (0 <= i < n and 0 <= j < n):
                    break
                if ptv[i, j] and not left_ptv:
                    continue
                left_ptv = True
                v = undipped[i, j]
                if np.isnan(v):
                    continue
                # distance to a non-convex-looking pixel grid can wobble by one pixel; allow that quantum
                assert v <= prev + 3.5 / n
                prev = min(prev, v)


def test_dose_matches_distance_formula():
    from scipy.ndimage import distance_transform_edt

    spec = builtin_spec("target-like")
    c = generate_case(spec, 3)
    ptv, oars, body = c.ptv[0] > 0.5, c.oars[0] > 0.5, c.body[0] > 0.5
    dist = distance_transform_edt(~ptv) / spec.image_size
    ring = body & ~oars & ~ptv & (c.dose[0] > 0)
    # dose = 1 - c*dist with one per-case falloff c
    slopes = (1.0 - c.dose[0][ring]) / dist[ring]
    np.testing.assert_allclose(slopes, slopes[0], rtol=1e-10)
    assert spec.falloff[0] <= slopes[0] <= spec.falloff[1]


def test_case_is_deterministic():
    spec = builtin_spec("source-like")
    a, b = generate_case(spec, 7), generate_case(spec, 7)
    for name in ("ct", "ptv", "oars", "dose"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert generate_case(spec, 8).dose.tobytes() != a.dose.tobytes()


def test_domains_differ_in_ptv_priors():
    s, t = builtin_spec("source-like"), builtin_spec("target-like")
    assert s.ptv_center != t.ptv_center and s.ptv_radius != t.ptv_radius
    size_s = np.mean([c.ptv.sum() for c in make_cases(s, 40)])
    size_t = np.mean([c.ptv.sum() for c in make_cases(t, 40)])
    assert size_t > 1.3 * size_s


def test_unknown_spec():
    with pytest.raises(ConfigError):
        builtin_spec("liver-like")


# -- dataset ----------------------------------------------------------------------

def test_single_case_dataset(tmp_path):
    manifest = generate_dataset(builtin_spec("source-like"), 1, tmp_path)
    assert sorted(os.listdir(tmp_path / "case_0000")) == ["ct.pfmt", "dose.pfmt", "oars.pfmt", "ptv.pfmt"]
    lines = open(manifest).read().splitlines()
    assert lines[0] == "id,path,domain,seed_fingerprint"
    assert len(lines) == 2


def test_dataset_round_trip_and_fingerprint(tmp_path):
    spec = builtin_spec("target-like")
    m1 = generate_dataset(spec, 3, tmp_path / "a")
    m2 = generate_dataset(spec, 3, tmp_path / "b")
    assert open(m1).read() == open(m2).read()
    loaded = load_dataset(tmp_path / "a")
    for c, ref in zip(loaded, make_cases(spec, 3)):
        assert c.id == ref.id
        assert c.dose.tobytes() == ref.dose.tobytes()
        assert case_fingerprint(spec, c) == case_fingerprint(spec, ref)


def test_dataset_size_must_be_positive(tmp_path):
    with pytest.raises(ContractError):
        generate_dataset(builtin_spec("source-like"), 0, tmp_path)


def test_desk_sizes():
    from pfmdose.training import TrainConfig

    cfg = TrainConfig()
    assert (cfg.n_source, cfg.n_target) == (40, 12)  # roughly the 130:42 clinical ratio


# -- PFMT container ---------------------------------------------------------------

def test_2x2_file_is_50_bytes(tmp_path):
    path = tmp_path / "t.pfmt"
    pfmt.write_tensor(path, np.arange(4.0).reshape(2, 2))
    raw = path.read_bytes()
    assert len(raw) == 50
    assert raw[:4] == b"PFMT" and raw[4] == 1 and raw[5] == 1
    assert struct.unpack("<III", raw[6:18]) == (2, 2, 2)
    assert struct.unpack("<4d", raw[18:]) == (0.0, 1.0, 2.0, 3.0)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_bitwise(a):
    back = pfmt.decode(pfmt.encode(a))
    assert back.shape == a.shape
    assert back.tobytes() == a.tobytes()


def test_read_tensor(tmp_path, rng):
    a = rng.standard_normal((2, 3, 4))
    pfmt.write_tensor(tmp_path / "x.pfmt", Tensor(a))
    t = pfmt.read_tensor(tmp_path / "x.pfmt")
    assert isinstance(t, Tensor) and t.data.tobytes() == a.tobytes()


def test_truncated_payload_names_lengths(rng):
    raw = pfmt.encode(rng.standard_normal((2, 2)))
    with pytest.raises(FormatError) as exc:
        pfmt.decode(raw[:-3])
    msg = str(exc.value)
    assert "expected 32" in msg and "found 29" in msg and "byte offset" in msg


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"XFMT" + b[4:], 0),
        (lambda b: b[:4] + b"\x02" + b[5:], 4),
        (lambda b: b[:5] + b"\x07" + b[6:], 5),
        (lambda b: b[:8], 8),
        (lambda b: b[:12], 12),
        (lambda b: b + b"\x00", 50),
    ],
)
def test_corrupt_headers(mutate, offset):
    raw = pfmt.encode(np.zeros((2, 2)))
    with pytest.raises(FormatError) as exc:
        pfmt.decode(mutate(raw))
    assert exc.value.offset == offset
    assert f"byte offset {offset}" in str(exc.value)
