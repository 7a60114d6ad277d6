"""Model construction, symmetry guarantees, and checkpoint round-trips."""

import numpy as np
import pytest

from tensorpol import autodiff as ad
from tensorpol import tensor_algebra as ta
from tensorpol.graph import Molecule
from tensorpol.model import (
    Model,
    ModelConfig,
    UnknownElement,
    init_parameters,
    load_checkpoint,
    parameter_shapes,
    prepare,
    save_checkpoint,
)


def small_config(**overrides):
    base = dict(
        c_s=16,
        c_v=6,
        c_t=5,
        n_layers=2,
        cutoff=6.0,
        n_rbf=8,
        hidden=24,
        lora_rank=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def sample_molecule(seed=7, n=5, elements=(6, 1, 1, 8, 16)):
    rng = np.random.default_rng(seed)
    while True:
        pos = rng.uniform(-1.6, 1.6, size=(n, 3))
        diff = pos[:, None] - pos[None, :]
        d = np.linalg.norm(diff, axis=-1)
        if d[~np.eye(n, dtype=bool)].min() > 0.7:
            return Molecule("sample", np.array(elements[:n]), pos)


ABLATIONS = {
    "full": {},
    "rr_only": dict(branch_rr=True, branch_rv=False, branch_vv=False),
    "rv_only": dict(branch_rr=False, branch_rv=True, branch_vv=False),
    "all_branches": dict(branch_rr=True, branch_rv=True, branch_vv=True),
    "raw_basis": dict(use_sym=False, use_tl=False),
    "sym_no_tl": dict(use_sym=True, use_tl=False),
    "no_lora": dict(use_lora=False),
    "trace_feedback": dict(trace_feedback=True),
    "painn": dict(readout="painn_readout", c_t=0, branch_vv=False),
}


class TestConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.readout == "tensor_channel"
        assert cfg.tensor_active

    def test_bad_readout(self):
        with pytest.raises(ValueError):
            ModelConfig(readout="linear")

    def test_tensor_channel_requires_c_t(self):
        with pytest.raises(ValueError):
            small_config(c_t=0)

    def test_tensor_channel_requires_branch(self):
        with pytest.raises(ValueError):
            small_config(branch_rr=False, branch_rv=False, branch_vv=False)

    def test_lora_rank_positive(self):
        with pytest.raises(ValueError):
            small_config(use_lora=True, lora_rank=0)

    def test_painn_has_no_tensor_path(self):
        cfg = small_config(readout="painn_readout", c_t=0, branch_vv=False)
        assert not cfg.tensor_active
        assert cfg.psi_dim == 3 * cfg.c_v

    def test_psi_dim(self):
        cfg = small_config()
        assert cfg.psi_dim == 3 * cfg.c_v + 4 * cfg.c_t

    def test_roundtrip_dict(self):
        cfg = small_config(trace_feedback=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"c_s": 8, "bogus": 1})


class TestParameters:
    def test_registry_names_unique(self):
        shapes = parameter_shapes(small_config())
        names = [n for n, _, _ in shapes]
        assert len(names) == len(set(names))

    def test_init_matches_registry(self):
        cfg = small_config()
        params = init_parameters(cfg, seed=0)
        registry = dict((n, s) for n, s, _ in parameter_shapes(cfg))
        assert set(params) == set(registry)
        for name, p in params.items():
            assert p.value.shape == registry[name]
            assert p.is_param and p.needs_grad

    def test_biases_and_lora_b_zero(self):
        params = init_parameters(small_config(), seed=3)
        for name, p in params.items():
            if name.endswith(".b") or "lora_b" in name:
                assert not p.value.any()
        assert params["layers.0.lora_a"].value.any()

    def test_seed_determinism(self):
        cfg = small_config()
        a = init_parameters(cfg, seed=5)
        b = init_parameters(cfg, seed=5)
        c = init_parameters(cfg, seed=6)
        assert all(np.array_equal(a[k].value, b[k].value) for k in a)
        assert any(not np.array_equal(a[k].value, c[k].value) for k in a)

    def test_n_parameters_is_registry_sum(self):
        cfg = small_config()
        model = Model.init(cfg)
        assert model.n_parameters() == sum(
            int(np.prod(s)) for _, s, _ in parameter_shapes(cfg)
        )


class TestForward:
    def test_output_shape_and_dtype(self):
        model = Model.init(small_config(), seed=0)
        out = model.forward(model.prepare(sample_molecule()))
        assert out.value.shape == (3, 3)
        assert out.value.dtype == np.float32

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_output_symmetric_under_every_ablation(self, name):
        model = Model.init(small_config(**ABLATIONS[name]), seed=1).astype(np.float64)
        alpha = model.predict(sample_molecule())
        assert np.abs(alpha - alpha.T).max() < 1e-12

    def test_determinism_bitwise(self):
        model = Model.init(small_config(), seed=2)
        mol = sample_molecule()
        a = model.predict(mol)
        b = model.predict(mol)
        assert np.array_equal(a, b)

    def test_translation_invariance(self):
        model = Model.init(small_config(), seed=3).astype(np.float64)
        mol = sample_molecule()
        shifted = Molecule(mol.mol_id, mol.atomic_numbers, mol.positions + 11.3)
        assert np.abs(model.predict(mol) - model.predict(shifted)).max() < 1e-10

    def test_permutation_invariance(self):
        model = Model.init(small_config(), seed=4).astype(np.float64)
        mol = sample_molecule()
        perm = np.array([3, 0, 4, 1, 2])
        permuted = Molecule(mol.mol_id, mol.atomic_numbers[perm], mol.positions[perm])
        assert np.abs(model.predict(mol) - model.predict(permuted)).max() < 1e-10

    def test_isolated_atom_is_isotropic(self):
        model = Model.init(small_config(), seed=5).astype(np.float64)
        mol = Molecule("atom", np.array([8]), np.zeros((1, 3)))
        alpha = model.predict(mol)
        iso = np.trace(alpha) / 3.0
        assert np.abs(alpha - iso * np.eye(3)).max() < 1e-14

    def test_inversion_parity(self):
        # alpha is parity-even: mirroring the geometry through the origin
        # must leave the prediction unchanged
        model = Model.init(small_config(), seed=6).astype(np.float64)
        mol = sample_molecule()
        mirrored = Molecule(mol.mol_id, mol.atomic_numbers, -mol.positions)
        assert np.abs(model.predict(mol) - model.predict(mirrored)).max() < 1e-10

    def test_no_tape_records_nothing(self):
        model = Model.init(small_config(), seed=0)
        model.predict(sample_molecule())
        with ad.Tape() as tape:
            pass
        assert tape.nodes == []


class TestEquivariance:
    def rotation_residual(self, cfg, dtype, n_rot=4, seed=11):
        model = Model.init(cfg, seed=seed).astype(dtype)
        mol = sample_molecule()
        base = model.predict(mol)
        rng = np.random.default_rng(99)
        worst = 0.0
        for r in ta.sample_rotations(n_rot, rng):
            rotated = model.predict(mol.rotated(r))
            worst = max(worst, ta.frob_norm(rotated - ta.conjugate(r, base)))
        return worst

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_equivariant_float64(self, name):
        cfg = small_config(**ABLATIONS[name])
        assert self.rotation_residual(cfg, np.float64) < 1e-9

    def test_equivariant_float32(self):
        assert self.rotation_residual(small_config(), np.float32) < 1e-4


class TestLayerStates:
    def collect(self, **overrides):
        model = Model.init(small_config(**overrides), seed=8).astype(np.float64)
        _, states = model.forward(model.prepare(sample_molecule()), collect_states=True)
        return states

    def test_one_state_per_layer(self):
        states = self.collect()
        assert len(states) == 2
        assert states[0].s.shape == (5, 16)
        assert states[0].v.shape == (5, 6, 3)
        assert states[0].t.shape == (5, 5, 3, 3)

    def test_traceless_projection_holds_per_layer(self):
        for st in self.collect(use_tl=True):
            assert np.abs(np.trace(st.t, axis1=-2, axis2=-1)).max() < 1e-12

    def test_symmetric_projection_holds_per_layer(self):
        for st in self.collect(use_sym=True, use_tl=False):
            assert np.abs(st.t - np.swapaxes(st.t, -1, -2)).max() < 1e-12

    def test_raw_basis_breaks_symmetry(self):
        # with projections off the RV/VV bases are genuinely non-symmetric
        worst = 0.0
        for st in self.collect(use_sym=False, use_tl=False):
            worst = max(worst, np.abs(st.t - np.swapaxes(st.t, -1, -2)).max())
        assert worst > 1e-6

    def test_painn_states_have_no_tensor(self):
        states = self.collect(readout="painn_readout", c_t=0, branch_vv=False)
        assert all(st.t is None for st in states)


class TestGradients:
    def test_loss_gradients_nonzero_and_finite(self):
        model = Model.init(small_config(), seed=9)
        prep = model.prepare(sample_molecule())
        target = ad.constant(np.eye(3, dtype=np.float32))
        with ad.Tape() as tape:
            loss = ad.frobenius_norm(ad.sub(model.forward(prep), target))
        grads = ad.backward(tape, loss)
        touched = {k for k, p in model.params.items() if p in grads}
        # every parameter except the zero-initialized lora_b factors gets a
        # gradient through a single forward pass
        assert all(np.isfinite(grads[p]).all() for p in grads)
        for name, p in model.params.items():
            assert p in grads, name
        nonzero = [k for k, p in model.params.items() if grads[p].any()]
        assert "embed.table" in nonzero
        assert any(k.startswith("readout.") for k in nonzero)
        assert len(touched) == len(model.params)

    def test_gradcheck_through_tiny_model(self):
        cfg = small_config(c_s=4, c_v=2, c_t=2, n_layers=1, hidden=5, n_rbf=3)
        model = Model.init(cfg, seed=10).astype(np.float64)
        prep = model.prepare(sample_molecule(n=3, elements=(6, 1, 8)))

        def loss_value():
            with ad.Tape() as tape:
                loss = ad.frobenius_norm(model.forward(prep))
            return tape, loss

        tape, loss = loss_value()
        grads = ad.backward(tape, loss)
        rng = np.random.default_rng(0)
        checked = 0
        for name in ("embed.table", "layers.0.scalar_msg.0.w", "layers.0.tensor_coeff.1.w",
                     "layers.0.lora_a", "readout.gate.1.w", "readout.iso.b"):
            p = model.params[name]
            flat_idx = rng.integers(p.value.size)
            idx = np.unravel_index(flat_idx, p.value.shape)
            h = 1e-6
            orig = p.value[idx]
            p.value[idx] = orig + h
            _, lp = loss_value()
            p.value[idx] = orig - h
            _, lm = loss_value()
            p.value[idx] = orig
            fd = (lp.value - lm.value) / (2 * h)
            an = grads[p][idx]
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-8), name
            checked += 1
        assert checked == 6


class TestPrepare:
    def test_unknown_element_rejected(self):
        mol = Molecule("he", np.array([2]), np.zeros((1, 3)))
        with pytest.raises(UnknownElement):
            prepare(mol, small_config())

    def test_feature_dtypes_follow_request(self):
        prep = prepare(sample_molecule(), small_config(), np.float64)
        assert prep.rbf.dtype == np.float64
        assert prep.env_col.shape == (prep.edges.n_edges, 1)
        assert prep.rhat_row.shape == (prep.edges.n_edges, 1, 3)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "model.ckpt"
        model = Model.init(small_config(trace_feedback=True), seed=12)
        extra = {"ema/embed.table": model.params["embed.table"].value * 0.5}
        save_checkpoint(path, model, seed=12, step=77, extra=extra)
        loaded, meta, loaded_extra = load_checkpoint(path)
        assert meta["step"] == 77
        assert meta["seed"] == 12
        assert loaded.config == model.config
        for name, p in model.params.items():
            assert np.array_equal(loaded.params[name].value, p.value)
        assert np.array_equal(loaded_extra["ema/embed.table"], extra["ema/embed.table"])
        mol = sample_molecule()
        assert np.array_equal(model.predict(mol), loaded.predict(mol))

    def test_missing_parameter_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        model = Model.init(small_config(), seed=0)
        del model.params["readout.iso.b"]
        save_checkpoint(path, model)
        with pytest.raises(ValueError, match="mismatch"):
            load_checkpoint(path)
