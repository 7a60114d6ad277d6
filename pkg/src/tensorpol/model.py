"""Tensor-channel equivariant network for rank-2 molecular tensors.

Per-atom scalar (C_s), vector (C_v x 3), and symmetric rank-2 tensor
(C_t x 3 x 3) states are propagated through L interaction blocks. Each
block updates scalars from invariant summaries, vectors from gated
directional messages, and tensors from branch-specific bases built out of
edge directions and learned directional features (RR / RV / VV). Readout
is either a gated superposition of the tensor channels or a vector-based
construction at the output only (the readout-only baseline).

Built entirely on the in-repo reverse-mode engine so the whole forward
pass is differentiable and certifiable.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .graph import SUPPORTED_ELEMENTS, EdgeFeatures, Molecule, build_graph

Z_TO_INDEX = {z: i for i, z in enumerate(SUPPORTED_ELEMENTS)}

CHECKPOINT_FORMAT_VERSION = 1


class UnknownElement(ValueError):
    """Atomic number outside the supported element set."""


@dataclass
class ModelConfig:
    """Architecture switches; the ablation matrix is spanned by the flags."""

    c_s: int = 148
    c_v: int = 37
    c_t: int = 37
    n_layers: int = 8
    cutoff: float = 10.0
    n_rbf: int = 20
    hidden: int = 287
    branch_rr: bool = False
    branch_rv: bool = False
    branch_vv: bool = True
    use_sym: bool = True
    use_tl: bool = True
    use_lora: bool = True
    lora_rank: int = 8
    trace_feedback: bool = False
    readout: str = "tensor_channel"  # or "painn_readout"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.readout not in ("tensor_channel", "painn_readout"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.c_s < 1 or self.c_v < 1:
            raise ValueError("c_s and c_v must be at least 1")
        if self.readout == "tensor_channel":
            if self.c_t < 1:
                raise ValueError("tensor_channel readout needs c_t >= 1")
            if not (self.branch_rr or self.branch_rv or self.branch_vv):
                raise ValueError("tensor_channel readout needs at least one branch")
        if self.use_lora and self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1 when use_lora")
        if self.n_layers < 1:
            raise ValueError("need at least one interaction layer")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")

    @property
    def tensor_active(self) -> bool:
        return self.c_t >= 1 and (self.branch_rr or self.branch_rv or self.branch_vv)

    @property
    def n_branches(self) -> int:
        return int(self.branch_rr) + int(self.branch_rv) + int(self.branch_vv)

    @property
    def psi_dim(self) -> int:
        # |v_i|, |v_j|, <v_i, v_j> per vector channel; frob and trace of t
        # for both endpoints per tensor channel
        d = 3 * self.c_v
        if self.tensor_active:
            d += 4 * self.c_t
        return d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AtomState:
    """Numpy snapshot of the per-atom feature blocks after one block."""

    s: np.ndarray  # (N, C_s)
    v: np.ndarray  # (N, C_v, 3)
    t: np.ndarray | None  # (N, C_t, 3, 3) or None when the tensor path is off


@dataclass
class PreparedMolecule:
    """Featurized, dtype-cast constants for one molecule."""

    z_index: np.ndarray
    edges: EdgeFeatures
    rbf: np.ndarray  # (E, K)
    env_col: np.ndarray  # (E, 1)
    rhat_row: np.ndarray  # (E, 1, 3)
    rel_pos: np.ndarray  # (N, 3), centroid-relative
    n_atoms: int
    target: np.ndarray | None = None


def prepare(mol: Molecule, config: ModelConfig, dtype=np.float32) -> PreparedMolecule:
    """Build the radius graph and cast edge features to the model dtype."""
    for z in np.unique(mol.atomic_numbers):
        if int(z) not in Z_TO_INDEX:
            raise UnknownElement(f"{mol.mol_id}: atomic number {z} not supported")
    edges = build_graph(mol, config.cutoff, config.n_rbf)
    z_index = np.array([Z_TO_INDEX[int(z)] for z in mol.atomic_numbers], dtype=np.intp)
    rel = mol.positions - mol.positions.mean(axis=0)
    target = None
    if mol.target_alpha is not None:
        target = mol.target_alpha.astype(np.float64)
    return PreparedMolecule(
        z_index=z_index,
        edges=edges,
        rbf=edges.rbf.astype(dtype),
        env_col=edges.envelope.astype(dtype)[:, None],
        rhat_row=edges.rhat.astype(dtype)[:, None, :],
        rel_pos=rel.astype(dtype),
        n_atoms=mol.n_atoms,
        target=target,
    )


# ---------------------------------------------------------------------------
# parameter registry


def _mlp_shapes(base, d_in, hidden, d_out, final_small=False):
    return [
        (f"{base}.0.w", (d_in, hidden), "w"),
        (f"{base}.0.b", (hidden,), "b"),
        (f"{base}.1.w", (hidden, d_out), "w_small" if final_small else "w"),
        (f"{base}.1.b", (d_out,), "b"),
    ]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init_kind) registry; the single source of truth
    for initialization, counting, and checkpoint layout."""
    c = config
    shapes = [("embed.table", (len(SUPPORTED_ELEMENTS), c.c_s), "embed")]
    edge_in = 2 * c.c_s + c.n_rbf
    for layer in range(c.n_layers):
        p = f"layers.{layer}"
        shapes += _mlp_shapes(f"{p}.scalar_msg", edge_in + c.psi_dim, c.hidden, c.c_s)
        shapes += _mlp_shapes(f"{p}.scalar_upd", 2 * c.c_s, c.hidden, c.c_s)
        shapes += _mlp_shapes(f"{p}.vector_edge", edge_in, c.hidden, 3 * c.c_v)
        shapes += _mlp_shapes(f"{p}.vector_gate", c.c_s, c.hidden, c.c_v)
        if c.tensor_active:
            if c.branch_rv or c.branch_vv or c.trace_feedback:
                shapes.append((f"{p}.proj_u", (c.c_v, c.c_t), "w"))
            if c.branch_vv:
                shapes.append((f"{p}.proj_w", (c.c_v, c.c_t), "w"))
            coeff_in = edge_in + (c.c_t if c.trace_feedback else 0)
            shapes += _mlp_shapes(
                f"{p}.tensor_coeff", coeff_in, c.hidden, c.n_branches * c.c_t
            )
            if c.use_lora:
                shapes.append((f"{p}.lora_a", (c.c_t, c.lora_rank), "w"))
                shapes.append((f"{p}.lora_b", (c.lora_rank, c.c_t), "zeros"))
            shapes += _mlp_shapes(f"{p}.tensor_gate", c.c_s, c.hidden, c.c_t)
    # Isotropic head is a plain linear map (no positivity constraint): per-atom
    # iso contributions may be negative even though molecular iso is positive.
    shapes += [("readout.iso.w", (c.c_s, 1), "w_small"), ("readout.iso.b", (1,), "b")]
    if c.readout == "tensor_channel":
        shapes += _mlp_shapes("readout.gate", c.c_s, c.hidden, c.c_t)
    else:
        shapes.append(("readout.nu", (c.c_v, 1), "w_small"))
    return shapes


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32):
    """Uniform fan-in init; readout heads scaled down so initial outputs are small."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = {}
    for name, shape, kind in parameter_shapes(config):
        if kind == "embed":
            arr = rng.standard_normal(shape)
        elif kind == "zeros" or kind == "b":
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
            if kind == "w_small":
                arr *= 0.1
        params[name] = ad.parameter(arr.astype(dtype))
    return params


# ---------------------------------------------------------------------------
# forward pass


def _linear(params, name, x):
    return ad.add(ad.matmul(x, params[name + ".w"]), params[name + ".b"])


def _mlp(params, name, x):
    return _linear(params, name + ".1", ad.silu(_linear(params, name + ".0", x)))


def _basis_projection(config: ModelConfig):
    if config.use_tl:
        return ad.traceless_mat
    if config.use_sym:
        return ad.sym_mat
    return lambda x: x


class Model:
    """Bundles a ModelConfig with its parameter dict and runs the forward pass."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(config, init_parameters(config, seed, dtype))

    @property
    def dtype(self):
        return self.params["embed.table"].value.dtype

    def astype(self, dtype) -> "Model":
        cast = {k: ad.parameter(p.value.astype(dtype)) for k, p in self.params.items()}
        return Model(self.config, cast)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def prepare(self, mol: Molecule) -> PreparedMolecule:
        return prepare(mol, self.config, self.dtype)

    def forward(self, prep: PreparedMolecule, collect_states: bool = False):
        """Predicted 3x3 tensor as a DiffValue (recorded if a Tape is active).

        With collect_states, also returns the per-layer AtomState snapshots.
        """
        cfg = self.config
        params = self.params
        dtype = self.dtype
        n = prep.n_atoms
        src, dst = prep.edges.src, prep.edges.dst
        rbf = ad.constant(prep.rbf)
        env = ad.constant(prep.env_col)  # (E, 1)
        rhat = ad.constant(prep.rhat_row)  # (E, 1, 3)

        s = ad.gather(params["embed.table"], prep.z_index)
        v = ad.constant(np.zeros((n, cfg.c_v, 3), dtype=dtype))
        t = None
        if cfg.tensor_active:
            t = ad.constant(np.zeros((n, cfg.c_t, 3, 3), dtype=dtype))
        project = _basis_projection(cfg)
        states = []

        for layer in range(cfg.n_layers):
            p = f"layers.{layer}"

            # scalar channel: invariant messages, residual update
            psi_parts = []
            vnorm = ad.norm_over_last(v, 1)  # (N, C_v)
            v_dst, v_src = ad.gather(v, dst), ad.gather(v, src)
            psi_parts.append(ad.gather(vnorm, dst))
            psi_parts.append(ad.gather(vnorm, src))
            psi_parts.append(ad.sum_over(ad.mul(v_dst, v_src), axis=-1))
            if cfg.tensor_active:
                tfrob = ad.norm_over_last(t, 2)  # (N, C_t)
                ttrace = ad.trace_mat(t)  # (N, C_t)
                psi_parts.append(ad.gather(tfrob, dst))
                psi_parts.append(ad.gather(tfrob, src))
                psi_parts.append(ad.gather(ttrace, dst))
                psi_parts.append(ad.gather(ttrace, src))
            s_dst, s_src = ad.gather(s, dst), ad.gather(s, src)
            edge_scalar = ad.concat([s_dst, s_src, rbf] + psi_parts, axis=1)
            m_s = ad.mul(_mlp(params, f"{p}.scalar_msg", edge_scalar), env)
            agg_s = ad.scatter_sum(m_s, dst, n)
            s = ad.add(s, _mlp(params, f"{p}.scalar_upd", ad.concat([s, agg_s], axis=1)))

            # vector channel: gated directional + propagated features
            s_dst, s_src = ad.gather(s, dst), ad.gather(s, src)
            edge_in = ad.concat([s_dst, s_src, rbf], axis=1)
            vec_out = _mlp(params, f"{p}.vector_edge", edge_in)
            a_dir = ad.narrow(vec_out, 1, 0, cfg.c_v)
            a_mix = ad.narrow(vec_out, 1, cfg.c_v, cfg.c_v)
            gate_logits = ad.narrow(vec_out, 1, 2 * cfg.c_v, cfg.c_v)
            g_edge = ad.mul(ad.sigmoid(gate_logits), env)  # (E, C_v)
            e3 = (prep.edges.n_edges, cfg.c_v, 1)
            m_v = ad.mul(
                ad.reshape(g_edge, e3),
                ad.add(
                    ad.mul(ad.reshape(a_dir, e3), rhat),
                    ad.mul(ad.reshape(a_mix, e3), v_src),
                ),
            )
            agg_v = ad.scatter_sum(m_v, dst, n)
            gate_v = ad.sigmoid(_mlp(params, f"{p}.vector_gate", s))
            v = ad.add(v, ad.mul(ad.reshape(gate_v, (n, cfg.c_v, 1)), agg_v))

            # tensor channel: branch bases, edge coefficients, gated residual
            if cfg.tensor_active:
                need_u = cfg.branch_rv or cfg.branch_vv or cfg.trace_feedback
                u_src = w_src = None
                if need_u:
                    u_src = ad.gather(ad.mix_channels(v, params[f"{p}.proj_u"]), src)
                if cfg.branch_vv:
                    w_src = ad.gather(ad.mix_channels(v, params[f"{p}.proj_w"]), src)
                coeff_in = edge_in
                if cfg.trace_feedback:
                    # trace of sym(rhat x u_j) fed back as invariant scalars
                    tf = ad.sum_over(ad.mul(rhat, u_src), axis=-1)
                    coeff_in = ad.concat([edge_in, tf], axis=1)
                coeffs = _mlp(params, f"{p}.tensor_coeff", coeff_in)
                e4 = (prep.edges.n_edges, cfg.c_t, 1, 1)
                msg = None
                offset = 0
                for flag, basis_fn in (
                    (cfg.branch_rr, lambda: ad.outer(rhat, rhat)),
                    (cfg.branch_rv, lambda: ad.outer(rhat, u_src)),
                    (cfg.branch_vv, lambda: ad.outer(u_src, w_src)),
                ):
                    if not flag:
                        continue
                    c_branch = ad.mul(ad.narrow(coeffs, 1, offset, cfg.c_t), env)
                    offset += cfg.c_t
                    term = ad.mul(ad.reshape(c_branch, e4), project(basis_fn()))
                    msg = term if msg is None else ad.add(msg, term)
                agg_t = ad.scatter_sum(msg, dst, n)
                if cfg.use_lora:
                    lora_map = ad.matmul(params[f"{p}.lora_a"], params[f"{p}.lora_b"])
                    agg_t = ad.add(agg_t, ad.mix_channels(agg_t, lora_map))
                gate_t = ad.sigmoid(_mlp(params, f"{p}.tensor_gate", s))
                t = ad.add(t, ad.mul(ad.reshape(gate_t, (n, cfg.c_t, 1, 1)), agg_t))

            if collect_states:
                states.append(
                    AtomState(
                        s=s.value.copy(),
                        v=v.value.copy(),
                        t=t.value.copy() if t is not None else None,
                    )
                )

        alpha = self._readout(prep, s, v, t)
        if collect_states:
            return alpha, states
        return alpha

    def _readout(self, prep, s, v, t):
        cfg = self.config
        params = self.params
        n = prep.n_atoms
        iso = _linear(params, "readout.iso", s)  # (N, 1)
        iso_part = ad.iso_mat(ad.reshape(iso, (n,)))  # (N, 3, 3)
        if cfg.readout == "tensor_channel":
            gates = ad.sigmoid(_mlp(params, "readout.gate", s))  # (N, C_t)
            # final sym keeps the output exactly symmetric under every ablation
            weighted = ad.mul(ad.reshape(gates, (n, cfg.c_t, 1, 1)), ad.sym_mat(t))
            aniso_part = ad.sum_over(weighted, axis=1)  # (N, 3, 3)
        else:
            nu = ad.reshape(ad.mix_channels(v, params["readout.nu"]), (n, 3))
            aniso_part = ad.sym_mat(ad.outer(nu, ad.constant(prep.rel_pos)))
        per_atom = ad.add(iso_part, aniso_part)
        return ad.sum_over(per_atom, axis=0)

    def predict(self, mol: Molecule) -> np.ndarray:
        """Inference convenience: Molecule in, float64 3x3 tensor out."""
        out = self.forward(self.prepare(mol))
        return np.asarray(out.value, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(
    path,
    model: Model,
    seed: int = 0,
    step: int = 0,
    extra: dict | None = None,
    meta_extra: dict | None = None,
):
    """Versioned npz container: config + named float payloads.

    `extra` carries training state as additional arrays under prefixed names
    (e.g. "ema/<param>", "opt_m/<param>", "opt_v/<param>"); `meta_extra`
    adds JSON-serializable scalars to the meta block (loop counters etc.).
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "dtype": np.dtype(model.dtype).name,
    }
    meta.update(meta_extra or {})
    arrays = {f"param/{k}": p.value for k, p in model.params.items()}
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (Model, meta dict, extra arrays dict)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        config = ModelConfig.from_dict(meta["config"])
        params = {}
        extra = {}
        for key in data.files:
            if key == "__meta__":
                continue
            if key.startswith("param/"):
                params[key[len("param/"):]] = ad.parameter(data[key])
            else:
                extra[key] = data[key]
    expected = {name for name, _, _ in parameter_shapes(config)}
    if set(params) != expected:
        missing = expected - set(params)
        surplus = set(params) - expected
        raise ValueError(f"checkpoint parameters mismatch: missing {missing}, surplus {surplus}")
    return Model(config, params), meta, extra
