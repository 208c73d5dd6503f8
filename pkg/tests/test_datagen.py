"""Coefficient samplers, sources, dataset assembly, scaling, and the
container format."""

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpdenet import datagen
from vpdenet.datagen import (Dataset, GrfParams, RingFieldParams, build_dataset,
                             diagonal_scale_dataset, diagonal_unscale_dataset,
                             make_source, manufactured_solution,
                             read_dataset, ring_field_values, sample_darcy_field,
                             sample_grf, sample_ring_field, write_dataset, SourceSpec)
from vpdenet.grid import (GridField, assemble_operator, assemble_rhs, darcy_spec,
                          grid_coords, helmholtz_spec, poisson_spec)


def test_high_contrast_ring_field_magnitude():
    f = sample_ring_field(RingFieldParams(amplitude=6e5), 65, rng_seed=7)
    assert 1e5 <= f.values.max() <= 2e7     # ~1e6 regime
    assert f.values.min() >= 0.0


def test_moderate_ring_field_magnitude():
    f = sample_ring_field(RingFieldParams(amplitude=0.5), 65, rng_seed=7)
    assert 0.05 <= f.values.max() <= 3.0    # order one


def test_single_ring_vanishes_at_angular_zero():
    # with cos(2k*theta) = 0 the squared modulation kills the ring term
    params = RingFieldParams(amplitude=1.0, num_rings=1, radii=(0.2,), freqs=(1,),
                             sigma=0.05, centers=np.array([[0.5, 0.5]]))
    theta = np.pi / 4  # cos(2*theta) = 0
    x = 0.5 + 0.2 * np.cos(theta)
    y = 0.5 + 0.2 * np.sin(theta)
    m = 201  # point (x, y) not exactly a node; evaluate on a tiny custom grid
    vals = ring_field_values(params, m)
    xi = int(round(x * (m - 1)))
    yi = int(round(y * (m - 1)))
    assert vals[yi, xi] < 5e-3 * vals.max()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ring_field_nonnegative(seed):
    f = sample_ring_field(RingFieldParams(amplitude=6e5), 17, rng_seed=seed)
    assert np.all(f.values >= 0.0)


def test_ring_field_deterministic_replay():
    a = sample_ring_field(RingFieldParams(amplitude=2.0), 33, rng_seed=11)
    b = sample_ring_field(RingFieldParams(amplitude=2.0), 33, rng_seed=11)
    assert np.array_equal(a.values, b.values)


# ---------------------------------------------------------------------------
# binary permeability fields

def test_darcy_field_binary_values():
    f = sample_darcy_field(GrfParams(), 33, rng_seed=3)
    assert set(np.unique(f.values)) <= {3.0, 12.0}


def test_darcy_high_fraction_is_half_on_average():
    fracs = [np.mean(sample_darcy_field(GrfParams(), 17, rng_seed=s).values == 12.0)
             for s in range(200)]
    assert abs(np.mean(fracs) - 0.5) < 0.05


def test_grf_mode_variance_matches_spectrum():
    # Monte-Carlo variance of the (1, 0) KL coefficient vs the closed form
    params = GrfParams()
    m = 33
    t = np.linspace(0, 1, m)
    w = np.full(m, 1.0 / (m - 1))
    w[0] = w[-1] = 0.5 / (m - 1)       # trapezoid weights
    phi = np.sqrt(2.0) * np.cos(np.pi * t)
    draws = 10_000
    coefs = np.empty(draws)
    for s in range(draws):
        g = sample_grf(params, m, rng_seed=(123, s))
        # project: integrate g * phi(x) over x, then over y against phi_0 = 1
        coefs[s] = np.einsum("rc,c,r->", g, w * phi, w)
    expected = (np.pi ** 2 + params.shift) ** -2
    assert abs(coefs.var() - expected) / expected < 0.05


# ---------------------------------------------------------------------------
# sources

def test_gaussian_source_peak_location():
    f, flux = make_source(SourceSpec(kind="gaussians"), 65)
    x, y = grid_coords(65)
    i = np.unravel_index(np.argmax(f.values), f.values.shape)
    assert f.values[i] >= 1.0
    assert abs(x[i] - 0.5) < 0.05 and abs(y[i] - 0.8) < 0.05
    assert np.all(flux.left == 0) and np.all(flux.top == 0)


def test_constant_source():
    f, flux = make_source(SourceSpec(kind="one"), 17)
    assert np.all(f.values == 1.0)
    assert flux is None


def test_manufactured_source_symbolic_oracle():
    import sympy as sp

    xs, ys = sp.symbols("x y")
    u_sym = sp.Rational(14, 10) * sp.cos(5 * sp.pi * xs) * sp.sin(sp.Rational(8, 10) * sp.pi * ys)
    f_sym = u_sym - (sp.diff(u_sym, xs, 2) + sp.diff(u_sym, ys, 2))
    f_fn = sp.lambdify((xs, ys), f_sym, "numpy")
    m = 21
    f, _ = make_source(SourceSpec(kind="manufactured"), m)
    x, y = grid_coords(m)
    np.testing.assert_allclose(f.values, f_fn(x, y), rtol=1e-12)


def test_manufactured_source_accepts_eta():
    m = 9
    rng = np.random.default_rng(0)
    eta = GridField.from_values(rng.random((m, m)))
    f0, _ = make_source(SourceSpec(kind="manufactured"), m)
    f1, _ = make_source(SourceSpec(kind="manufactured"), m, eta=eta)
    u, _, _, _ = manufactured_solution(m)
    np.testing.assert_allclose(f1.values - f0.values, eta.values * u, atol=1e-12)


def test_gaussian_source_requires_three_centers():
    with pytest.raises(ValueError, match="3 centers"):
        SourceSpec(kind="gaussians", centers=((0.1, 0.1),), sigmas=(0.2,))


# ---------------------------------------------------------------------------
# dataset assembly

def residual_of(ds: Dataset, i: int) -> float:
    spec, m = ds.spec, ds.m
    ones = GridField.from_values(np.ones((m, m)))
    coeff = GridField.from_values(ds.coeff[i])
    if spec.family.value == "darcy":
        A = assemble_operator(spec, GridField.zeros(m), coeff)
    else:
        A = assemble_operator(spec, coeff, ones)
    fsrc, flux = datagen.source_for_spec(spec, m)
    b = assemble_rhs(spec, fsrc, flux)
    from vpdenet.grid import field_to_vector
    u = field_to_vector(spec, GridField.from_values(ds.solution[i]))
    return np.linalg.norm(A.matrix @ u - b) / np.linalg.norm(b)


def test_single_sample_dataset_residual():
    ds = build_dataset(poisson_spec(6e5), 1, 33, rng_seed=1)
    assert len(ds) == 1
    assert residual_of(ds, 0) <= ds.solver_tol


def test_every_family_builds_and_passes_residual_check():
    for spec in (poisson_spec(6e5), helmholtz_spec(100.0), darcy_spec()):
        ds = build_dataset(spec, 2, 33, rng_seed=9)
        for i in range(len(ds)):
            assert residual_of(ds, i) <= ds.solver_tol, spec.family


def test_dataset_replay_bit_identical():
    a = build_dataset(poisson_spec(6e5), 3, 17, rng_seed=42)
    b = build_dataset(poisson_spec(6e5), 3, 17, rng_seed=42)
    assert np.array_equal(a.coeff, b.coeff)
    assert np.array_equal(a.source, b.source)
    assert np.array_equal(a.solution, b.solution)


def test_parallel_generation_matches_serial():
    a = build_dataset(darcy_spec(), 4, 17, rng_seed=5, workers=2)
    b = build_dataset(darcy_spec(), 4, 17, rng_seed=5, workers=1)
    assert np.array_equal(a.solution, b.solution)


def test_count_must_be_positive():
    with pytest.raises(ValueError):
        build_dataset(poisson_spec(), 0, 17, rng_seed=0)


# ---------------------------------------------------------------------------
# diagonal scaling

def test_scaling_roundtrip_and_contrast_compression():
    ds = build_dataset(poisson_spec(6e5), 2, 33, rng_seed=8)
    sc = diagonal_scale_dataset(ds)
    assert np.abs(sc.coeff).max() < 1e-3 * np.abs(ds.coeff).max()
    back = diagonal_unscale_dataset(sc)
    for name in ("coeff", "source", "solution"):
        a, b = getattr(ds, name), getattr(back, name)
        assert np.abs(a - b).max() <= 1e-11 * np.abs(a).max()


def test_scaling_uniform_when_eta_zero():
    ds = build_dataset(poisson_spec(6e5), 1, 17, rng_seed=3)
    ds.coeff[...] = 0.0
    sc = diagonal_scale_dataset(ds)
    # interior diagonal is constant, so interior entries rescale uniformly
    inner = sc.solution[0][2:-2, 2:-2] / ds.solution[0][2:-2, 2:-2]
    assert np.allclose(inner, inner.flat[0])


def test_scaling_single_node_arithmetic():
    # diag 4 with eta=4, u=2, f=8 -> (1, 4, 4)
    d = 4.0
    eta, u, f = 4.0, 2.0, 8.0
    assert eta / d == 1.0
    assert np.sqrt(d) * u == 4.0
    assert f / np.sqrt(d) == 4.0


def test_scaling_restricted_to_reaction_diffusion_family():
    ds = build_dataset(darcy_spec(), 1, 17, rng_seed=2)
    with pytest.raises(ValueError):
        diagonal_scale_dataset(ds)


# ---------------------------------------------------------------------------
# container format

def test_container_roundtrip(tmp_path):
    ds = build_dataset(helmholtz_spec(100.0), 2, 17, rng_seed=6)
    p = str(tmp_path / "d.epd")
    write_dataset(ds, p)
    rd = read_dataset(p)
    assert rd.spec == ds.spec
    assert rd.m == ds.m and len(rd) == len(ds)
    for name in ("coeff", "source", "solution"):
        assert np.array_equal(getattr(rd, name), getattr(ds, name))
    assert rd.solver_tol == ds.solver_tol and rd.master_seed == ds.master_seed


def test_container_magic_and_truncation_detected(tmp_path):
    ds = build_dataset(poisson_spec(), 1, 9, rng_seed=0)
    p = str(tmp_path / "d.epd")
    write_dataset(ds, p)

    raw = open(p, "rb").read()
    bad = str(tmp_path / "bad.epd")
    with open(bad, "wb") as fh:
        fh.write(b"XXXX" + raw[4:])
    os.link(p + ".meta", bad + ".meta")
    with pytest.raises(ValueError, match="magic"):
        read_dataset(bad)

    trunc = str(tmp_path / "trunc.epd")
    with open(trunc, "wb") as fh:
        fh.write(raw[:-16])
    os.link(p + ".meta", trunc + ".meta")
    with pytest.raises(ValueError, match="size"):
        read_dataset(trunc)


def test_container_requires_sidecar(tmp_path):
    ds = build_dataset(poisson_spec(), 1, 9, rng_seed=0)
    p = str(tmp_path / "d.epd")
    write_dataset(ds, p)
    os.remove(p + ".meta")
    with pytest.raises(ValueError, match="sidecar"):
        read_dataset(p)
