import math

import numpy as np
import pytest

from eitbayes import fields as F
from eitbayes.mesh import ElectrodeLayout, Mesh, build_disk_mesh

# the three covariance configurations used throughout
LOG_GAUSS = dict(q=1e16, tau=40.0, alpha=6.0, boundary=F.NEUMANN2D, grid_size=128)
STAR = dict(q=1e9, tau=30.0, alpha=3.0, boundary=F.DIRICHLET1D, grid_size=256)
LEVEL = dict(q=1.0, tau=35.0, alpha=5.0, boundary=F.NEUMANN2D, grid_size=128)


def small(spec_kwargs, n=16):
    kw = dict(spec_kwargs)
    kw["grid_size"] = n
    return F.CovarianceSpec(**kw)


class TestSpecValidation:
    def test_rejects_nonpositive_q(self):
        with pytest.raises(ValueError, match="q"):
            F.CovarianceSpec(0.0, 1.0, 2.0, F.NEUMANN2D, 16)

    def test_rejects_negative_tau(self):
        with pytest.raises(ValueError, match="tau"):
            F.CovarianceSpec(1.0, -1.0, 2.0, F.NEUMANN2D, 16)

    def test_rejects_zero_tau_on_square(self):
        with pytest.raises(ValueError, match="constant"):
            F.CovarianceSpec(1.0, 0.0, 2.0, F.NEUMANN2D, 16)

    def test_zero_tau_legal_on_circle(self):
        spec = F.CovarianceSpec(1.0, 0.0, 2.0, F.DIRICHLET1D, 16)
        assert np.isfinite(F.mode_stddev(spec)).all()

    @pytest.mark.parametrize("n", [0, 3, 12, 100])
    def test_rejects_non_power_of_two(self, n):
        with pytest.raises(ValueError, match="power of two"):
            F.CovarianceSpec(1.0, 1.0, 2.0, F.NEUMANN2D, n)

    def test_low_alpha_warns(self):
        with pytest.warns(UserWarning, match="trace"):
            F.CovarianceSpec(1.0, 1.0, 1.0, F.NEUMANN2D, 16)
        with pytest.warns(UserWarning, match="trace"):
            F.CovarianceSpec(1.0, 1.0, 0.5, F.DIRICHLET1D, 16)

    def test_bad_boundary(self):
        with pytest.raises(ValueError, match="boundary"):
            F.CovarianceSpec(1.0, 1.0, 2.0, "periodic3d", 16)


class TestSynthesisAnalysis:
    @pytest.mark.parametrize("spec_kwargs", [LOG_GAUSS, STAR, LEVEL])
    def test_round_trip(self, spec_kwargs):
        spec = small(spec_kwargs, 32)
        rng = np.random.default_rng(5)
        shape = (spec.grid_size,) * spec.dim
        a = rng.standard_normal(shape)
        field = F.synthesize(spec, a, mean=0.7)
        back = F.transform_coefficients(spec.boundary, field.values - field.mean_offset)
        assert np.abs(back - a).max() < 1e-10

    def test_single_mode_synthesis_matches_direct_sum(self):
        spec = small(LEVEL, 16)
        n = spec.grid_size
        a = np.zeros((n, n))
        a[3, 5] = 2.0
        field = F.synthesize(spec, a)
        x = F.grid_coordinates(F.NEUMANN2D, n)
        phi = np.cos(3 * math.pi * (x[:, None] + 1) / 2) * np.cos(5 * math.pi * (x[None, :] + 1) / 2)
        assert np.allclose(field.values, 2.0 * phi, atol=1e-12)

    def test_dirichlet_single_mode(self):
        spec = small(STAR, 16)
        n = spec.grid_size
        a = np.zeros(n)
        k = 4
        a[k - 1] = 3.0
        field = F.synthesize(spec, a)
        th = F.grid_coordinates(F.DIRICHLET1D, n)
        phi = np.sin(k * (th + math.pi) / 2) / math.sqrt(math.pi)
        assert np.allclose(field.values, 3.0 * phi, atol=1e-12)

    def test_dirichlet_endpoints_vanish(self):
        spec = small(STAR, 64)
        rng = np.random.default_rng(1)
        field = F.sample_field(spec, 0.0, rng)
        ends = F.radial_eval(field, np.array([-math.pi, math.pi]))
        assert np.abs(ends).max() == 0.0


class TestSampling:
    def test_seed_determinism(self):
        spec = small(LOG_GAUSS, 32)
        a = F.sample_field(spec, 0.5, np.random.default_rng(99)).values
        b = F.sample_field(spec, 0.5, np.random.default_rng(99)).values
        assert np.array_equal(a, b)

    def test_mean_shift(self):
        spec = small(LEVEL, 32)
        f0 = F.sample_field(spec, 0.0, np.random.default_rng(3))
        f5 = F.sample_field(spec, 5.0, np.random.default_rng(3))
        assert np.allclose(f5.values - f0.values, 5.0, atol=1e-12)
        assert f5.mean_offset == 5.0

    @pytest.mark.parametrize(
        "q,tau,alpha,boundary",
        [
            (1.0, 2.0, 2.0, F.NEUMANN2D),
            (10.0, 5.0, 3.0, F.NEUMANN2D),
            (0.5, 1.0, 1.5, F.DIRICHLET1D),
            (100.0, 12.0, 2.5, F.DIRICHLET1D),
        ],
    )
    def test_mode_variance_law(self, q, tau, alpha, boundary):
        # empirical per-mode variance must match q (tau^2 + lambda_k)^(-alpha)
        spec = F.CovarianceSpec(q, tau, alpha, boundary, 16)
        rng = np.random.default_rng(hash((q, tau, boundary)) % 2**32)
        n_samp = 4000
        coeffs = np.array(
            [
                F.transform_coefficients(boundary, F.sample_field(spec, 0.0, rng).values)
                for _ in range(n_samp)
            ]
        )
        target = F.mode_stddev(spec) ** 2
        rel = np.abs(coeffs.var(axis=0) - target) / target
        assert rel.max() < 0.15  # ~4.7 sigma at 4000 samples

    def test_concentrated_spectrum_pointwise_variance(self):
        # alpha = 10, tau = 1: the constant mode dominates, variance ~ q N00^2
        spec = F.CovarianceSpec(1.0, 1.0, 10.0, F.NEUMANN2D, 16)
        rng = np.random.default_rng(2)
        vals = np.array([F.sample_field(spec, 0.0, rng).values for _ in range(20000)])
        assert abs(vals.var(axis=0).mean() - 0.25) / 0.25 < 0.05

    def test_coefficients_gaussian(self):
        spec = small(LEVEL, 16)
        rng = np.random.default_rng(11)
        a01 = np.array(
            [
                F.transform_coefficients(spec.boundary, F.sample_field(spec, 0.0, rng).values)[0, 1]
                for _ in range(8000)
            ]
        )
        z = a01 / F.mode_stddev(spec)[0, 1]
        n = len(z)
        skew = np.mean(z**3)
        kurt = np.mean(z**4) - 3.0
        assert abs(skew) < 4 * math.sqrt(6.0 / n)
        assert abs(kurt) < 4 * math.sqrt(24.0 / n)


@pytest.fixture(scope="module")
def mesh():
    return build_disk_mesh(1, ElectrodeLayout(16, 0.5, 0.01))


class TestGridToMesh:

    def test_constant_field(self, mesh):
        field = F.GridField(F.NEUMANN2D, np.full((32, 32), 4.25), 4.25)
        assert np.allclose(F.grid_to_mesh(field, mesh), 4.25, atol=1e-14)

    def test_linear_field_reproduced(self, mesh):
        n = 32
        x = F.grid_coordinates(F.NEUMANN2D, n)
        values = np.broadcast_to(x[:, None], (n, n)).copy()  # u(x, y) = x
        field = F.GridField(F.NEUMANN2D, values, 0.0)
        got = F.grid_to_mesh(field, mesh)
        assert np.abs(got - mesh.centroids()[:, 0]).max() < 1e-12

    def test_smooth_field_resolution_sweep(self, mesh):
        f = lambda x, y: np.sin(2.0 * x) * np.cos(y)
        target = f(mesh.centroids()[:, 0], mesh.centroids()[:, 1])
        errs = []
        for n in (16, 32, 64):
            x = F.grid_coordinates(F.NEUMANN2D, n)
            field = F.GridField(F.NEUMANN2D, f(x[:, None], x[None, :]), 0.0)
            errs.append(np.abs(F.grid_to_mesh(field, mesh) - target).max())
        assert errs[0] > errs[1] > errs[2]
        assert errs[1] / errs[2] > 2.5  # bilinear is second order

    def test_centroid_outside_square_rejected(self):
        nodes = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
        tri = Mesh(nodes, np.array([[0, 1, 2]]), np.empty((0, 2), int), np.empty(0, int), np.empty(0))
        field = F.GridField(F.NEUMANN2D, np.zeros((16, 16)), 0.0)
        with pytest.raises(F.GeometryError):
            F.grid_to_mesh(field, tri)

    def test_needs_square_field(self, mesh):
        field = F.GridField(F.DIRICHLET1D, np.zeros(16), 0.0)
        with pytest.raises(ValueError, match="neumann2d"):
            F.grid_to_mesh(field, mesh)


class TestRadialEval:
    def test_zero_field(self):
        field = F.GridField(F.DIRICHLET1D, np.zeros(32), 0.0)
        th = np.linspace(-math.pi, math.pi, 101)
        assert np.abs(F.radial_eval(field, th)).max() == 0.0

    def test_exact_at_grid_nodes(self):
        rng = np.random.default_rng(4)
        field = F.sample_field(F.CovarianceSpec(1.0, 1.0, 2.0, F.DIRICHLET1D, 32), 0.0, rng)
        th = F.grid_coordinates(F.DIRICHLET1D, 32)
        assert np.abs(F.radial_eval(field, th) - field.values).max() < 1e-14

    def test_continuous_across_wrap(self):
        rng = np.random.default_rng(4)
        field = F.sample_field(F.CovarianceSpec(1.0, 1.0, 2.0, F.DIRICHLET1D, 32), 0.0, rng)
        a = F.radial_eval(field, np.array([math.pi]))
        b = F.radial_eval(field, np.array([-math.pi + 1e-15]))
        assert abs(a[0] - b[0]) <= 1e-12

    def test_wraps_any_angle(self):
        rng = np.random.default_rng(4)
        field = F.sample_field(F.CovarianceSpec(1.0, 1.0, 2.0, F.DIRICHLET1D, 32), 0.0, rng)
        th = np.array([0.3, 0.3 + 2 * math.pi, 0.3 - 4 * math.pi])
        vals = F.radial_eval(field, th)
        assert np.abs(vals - vals[0]).max() < 1e-12

    def test_needs_circle_field(self):
        field = F.GridField(F.NEUMANN2D, np.zeros((8, 8)), 0.0)
        with pytest.raises(ValueError, match="dirichlet1d"):
            F.radial_eval(field, np.array([0.0]))


class TestFieldIO:
    @pytest.mark.parametrize("spec_kwargs", [LEVEL, STAR])
    def test_round_trip_bit_exact(self, tmp_path, spec_kwargs):
        spec = small(spec_kwargs, 32)
        field = F.sample_field(spec, 1.25, np.random.default_rng(8))
        path = tmp_path / "field.bin"
        F.write_field(path, field)
        again = F.read_field(path)
        assert again.boundary == field.boundary
        assert again.mean_offset == field.mean_offset
        assert np.array_equal(again.values, field.values)

    def test_header_is_single_text_line(self, tmp_path):
        field = F.GridField(F.DIRICHLET1D, np.arange(8.0), 0.5)
        path = tmp_path / "field.bin"
        F.write_field(path, field)
        with open(path, "rb") as fh:
            assert fh.readline() == b"gridfield v1 dirichlet1d 8 0.5\n"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "field.bin"
        path.write_bytes(b"somethingelse\n" + b"\x00" * 64)
        with pytest.raises(ValueError, match="header"):
            F.read_field(path)

    def test_short_payload_rejected(self, tmp_path):
        path = tmp_path / "field.bin"
        path.write_bytes(b"gridfield v1 dirichlet1d 8 0\n" + b"\x00" * 8)
        with pytest.raises(ValueError, match="payload"):
            F.read_field(path)
