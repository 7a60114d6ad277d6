import math

import numpy as np
import pytest

from tensorpol.graph import (
    DegenerateGeometry,
    Molecule,
    OutOfRange,
    bessel_rbf,
    build_graph,
    cosine_envelope,
)
from tensorpol.tensor_algebra import NonSymmetricInput, sample_rotation


def make_mol(positions, numbers=None, mol_id="m"):
    positions = np.asarray(positions, dtype=np.float64)
    if numbers is None:
        numbers = [6] * len(positions)
    return Molecule(mol_id, numbers, positions)


class TestMolecule:
    def test_needs_one_atom(self):
        with pytest.raises(ValueError):
            Molecule("empty", [], np.zeros((0, 3)))

    def test_rejects_asymmetric_target(self):
        bad = np.eye(3)
        bad[0, 1] = 1e-3
        with pytest.raises(NonSymmetricInput):
            Molecule("m", [1], [[0.0, 0.0, 0.0]], target_alpha=bad)

    def test_heavy_atom_count(self):
        mol = make_mol([[0, 0, 0], [1, 0, 0], [0, 1, 0]], numbers=[8, 1, 1])
        assert mol.heavy_atom_count() == 1


class TestBuildGraph:
    def test_pair_within_cutoff(self):
        g = build_graph(make_mol([[0, 0, 0], [3.0, 0, 0]]), cutoff=10.0)
        assert g.n_edges == 2

    def test_pair_outside_cutoff(self):
        g = build_graph(make_mol([[0, 0, 0], [12.0, 0, 0]]), cutoff=10.0)
        assert g.n_edges == 0

    def test_water_like_complete(self):
        pos = [[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]]
        g = build_graph(make_mol(pos, numbers=[8, 1, 1]), cutoff=10.0)
        assert g.n_edges == 6

    def test_no_self_edges(self):
        g = build_graph(make_mol(np.random.default_rng(0).uniform(0, 3, (5, 3))), 10.0)
        assert np.all(g.src != g.dst)

    def test_degenerate_geometry(self):
        with pytest.raises(DegenerateGeometry):
            build_graph(make_mol([[0, 0, 0], [0, 0, 1e-8]]), 10.0)

    def test_displacement_convention(self):
        g = build_graph(make_mol([[0, 0, 0], [2.0, 0, 0]]), 10.0)
        e = np.flatnonzero((g.dst == 0) & (g.src == 1))[0]
        assert np.allclose(g.r[e], [2.0, 0.0, 0.0])
        assert np.isclose(g.d[e], 2.0)
        assert np.allclose(g.rhat[e], [1.0, 0.0, 0.0])

    def test_unit_rhat_and_consistent_d(self):
        rng = np.random.default_rng(1)
        g = build_graph(make_mol(rng.uniform(0, 4, (8, 3))), cutoff=6.0)
        assert np.allclose(np.linalg.norm(g.rhat, axis=1), 1.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(g.r, axis=1), g.d, atol=1e-12)
        assert np.all((g.d > 0) & (g.d < 6.0))


class TestBesselRBF:
    def test_node_of_second_component(self):
        vals = bessel_rbf(5.0, 10.0, 4)
        assert abs(vals[1]) < 1e-14  # sin(2 pi d / c) at d = c/2

    def test_vanishes_at_cutoff(self):
        vals = bessel_rbf(10.0 - 1e-9, 10.0, 6)
        assert np.max(np.abs(vals)) < 1e-6

    def test_against_scalar_formula(self):
        # independent scalar evaluation of sqrt(2/c) sin(n pi d / c) / d
        d, c, k = 1.0, 10.0, 8
        expected = [
            math.sqrt(2.0 / c) * math.sin(n * math.pi * d / c) / d
            for n in range(1, k + 1)
        ]
        assert np.allclose(bessel_rbf(d, c, k), expected, atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            bessel_rbf(0.0, 10.0, 4)
        with pytest.raises(OutOfRange):
            bessel_rbf(10.0, 10.0, 4)


class TestCosineEnvelope:
    def test_half_cutoff(self):
        assert np.isclose(cosine_envelope(5.0, 10.0), 0.5)

    def test_limits(self):
        assert np.isclose(cosine_envelope(1e-9, 10.0), 1.0)
        assert cosine_envelope(10.0 - 1e-9, 10.0) < 1e-8

    def test_three_quarters(self):
        assert np.isclose(cosine_envelope(7.5, 10.0), 0.5 * (math.cos(0.75 * math.pi) + 1.0))

    def test_monotone_decreasing(self):
        d = np.linspace(0.01, 9.99, 200)
        env = cosine_envelope(d, 10.0)
        assert np.all(np.diff(env) < 0)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            cosine_envelope(-1.0, 10.0)


class TestGeometricInvariances:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.pos = rng.uniform(0, 4, (7, 3))
        self.mol = make_mol(self.pos)
        self.g = build_graph(self.mol, cutoff=6.0)

    def test_translation_invariance(self):
        shifted = build_graph(make_mol(self.pos + np.array([10.0, -3.0, 7.0])), 6.0)
        assert np.array_equal(shifted.src, self.g.src)
        assert np.allclose(shifted.r, self.g.r, atol=1e-12)
        assert np.allclose(shifted.d, self.g.d, atol=1e-12)
        assert np.allclose(shifted.rbf, self.g.rbf, atol=1e-12)
        assert np.allclose(shifted.envelope, self.g.envelope, atol=1e-12)

    def test_rotation_behavior(self):
        r = sample_rotation(np.random.default_rng(3))
        rot = build_graph(make_mol(self.pos @ r.T), 6.0)
        assert np.allclose(rot.r, self.g.r @ r.T, atol=1e-12)
        assert np.allclose(rot.rhat, self.g.rhat @ r.T, atol=1e-12)
        assert np.allclose(rot.d, self.g.d, atol=1e-12)
        assert np.allclose(rot.rbf, self.g.rbf, atol=1e-12)
        assert np.allclose(rot.envelope, self.g.envelope, atol=1e-12)

    def test_permutation_preserves_edge_multiset(self):
        perm = np.random.default_rng(4).permutation(len(self.pos))
        permuted = build_graph(make_mol(self.pos[perm]), 6.0)
        assert permuted.n_edges == self.g.n_edges
        a = sorted(np.round(self.g.d, 9).tolist())
        b = sorted(np.round(permuted.d, 9).tolist())
        assert a == b
