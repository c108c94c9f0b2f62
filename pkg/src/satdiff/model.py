"""Recurrent variable/clause message-passing denoiser and its checkpoint format.

Each of the R weight-shared iterations:

1. variables send polarity-specific messages to their clauses (segment sum);
2. a query head turns variable states into soft values q and every clause
   computes how unsatisfied it is under q (product of its literals' falsity);
3. clauses update their state from messages, unsatisfiedness and old state;
4. clauses send polarity-specific messages back, variables update.

The final variable state is mapped to (P(False), P(True)) by a softmax head.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from satdiff import autodiff as ad
from satdiff.autodiff import Segments, Tensor
from satdiff.formula import FactorGraph

MAGIC = b"DSAT"
FORMAT_VERSION = 1
NOISE_FEATURES = 4


class CheckpointError(ValueError):
    """Unreadable, truncated, or mismatched checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    R: int = 32
    queries: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError(f"hidden dim must be even and >= 2, got {self.d}")
        if self.R < 1:
            raise ValueError(f"iterations must be >= 1, got {self.R}")
        if self.queries < 1:
            raise ValueError(f"queries must be >= 1, got {self.queries}")


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: dict[str, Tensor]
    step: int = 0
    T: int = 0  # train-time schedule length, recorded in checkpoints
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, q = config.d, config.queries
    return {
        "noise.W": (NOISE_FEATURES, d),
        "noise.b": (d,),
        "var_init.W": (2 + d, d),
        "var_init.b": (d,),
        "clause_init": (d,),
        "v2c.W": (d, 2 * d),
        "query.W": (d, q),
        "query.b": (q,),
        "clause1.W": (2 * d + q, d),
        "clause1.b": (d,),
        "clause2.W": (d, d),
        "clause2.b": (d,),
        "clause_norm.g": (d,),
        "clause_norm.b": (d,),
        "c2v.W": (d, 2 * d),
        "var1.W": (2 * d, d),
        "var1.Win": (2 + d, d),
        "var1.b": (d,),
        "var2.W": (d, d),
        "var2.b": (d,),
        "var_norm.g": (d,),
        "var_norm.b": (d,),
        "out.W": (d, 2),
        "out.b": (2,),
    }


def init_model(config: ModelConfig) -> DenoiserModel:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("norm.g"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = ad.parameter(value.astype(np.float32), name=name)
    return DenoiserModel(config, params)


def noise_features(alpha_bar: np.ndarray) -> np.ndarray:
    a = np.asarray(alpha_bar, dtype=np.float64)
    return np.stack([a, a * a, np.sin(2 * np.pi * a), np.cos(2 * np.pi * a)], axis=-1)


class GraphIndex:
    """Per-graph index arrays reused across iterations and forward calls."""

    def __init__(self, fg: FactorGraph):
        self.fg = fg
        neg = (fg.polarity < 0).astype(np.int64)
        self.var_msg_rows = Segments(2 * fg.var_index + neg, 2 * fg.num_vars)
        self.clause_msg_rows = Segments(2 * fg.clause_index + neg, 2 * fg.num_clauses)
        self.edge_vars = Segments(fg.var_index, fg.num_vars)
        self.to_clause = Segments(fg.clause_index, fg.num_clauses)
        self.to_var = Segments(fg.var_index, fg.num_vars)
        # literal falsity under soft values q: 1 - q for x, q for -x
        self.falsity_offset = (fg.polarity > 0).astype(np.float32)[:, None]
        self.falsity_sign = (-fg.polarity).astype(np.float32)[:, None]
        c_deg = np.bincount(fg.clause_index, minlength=fg.num_clauses).astype(np.float32)
        v_deg = np.bincount(fg.var_index, minlength=fg.num_vars).astype(np.float32)
        self.clause_scale = 1.0 / np.sqrt(np.maximum(c_deg, 1.0))[:, None]
        self.var_scale = 1.0 / np.sqrt(np.maximum(v_deg, 1.0))[:, None]


def _mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    h = ad.relu(ad.add_row(ad.matmul(x, w1), b1))
    return ad.add_row(ad.matmul(h, w2), b2)


def forward(model: DenoiserModel, fg: FactorGraph | GraphIndex, x_t: np.ndarray,
            alpha_bar, return_logits: bool = False) -> Tensor:
    """x0 estimate, shape (num_vars, 2), rows summing to one."""
    gi = fg if isinstance(fg, GraphIndex) else GraphIndex(fg)
    fg = gi.fg
    p = model.params
    d, q_dim = model.config.d, model.config.queries
    n, m = fg.num_vars, fg.num_clauses
    dtype = p["out.W"].dtype
    x_t = np.asarray(x_t)
    if x_t.shape != (n, 2):
        raise ValueError(f"x_t shape {x_t.shape} does not match {n} variables")
    ab = np.broadcast_to(np.asarray(alpha_bar, dtype=np.float64), (n,))

    noise = ad.add_row(ad.matmul(ad.constant(noise_features(ab), dtype), p["noise.W"]), p["noise.b"])
    inputs = ad.concat([ad.constant(x_t, dtype), noise])
    h_v = ad.layer_norm(ad.add_row(ad.matmul(inputs, p["var_init.W"]), p["var_init.b"]))
    h_c = ad.add_row(ad.constant(np.zeros((m, d)), dtype), p["clause_init"])
    static_v = ad.add_row(ad.matmul(inputs, p["var1.Win"]), p["var1.b"])

    falsity_offset = ad.constant(np.broadcast_to(gi.falsity_offset, (fg.num_edges, q_dim)), dtype)
    falsity_sign = ad.constant(np.broadcast_to(gi.falsity_sign, (fg.num_edges, q_dim)), dtype)
    clause_scale = ad.constant(np.broadcast_to(gi.clause_scale, (m, d)), dtype)
    var_scale = ad.constant(np.broadcast_to(gi.var_scale, (n, d)), dtype)

    for _ in range(model.config.R):
        # variables -> clauses
        v_msg = ad.reshape(ad.matmul(h_v, p["v2c.W"]), (2 * n, d))
        c_in = ad.mul(ad.segment_sum(ad.gather(v_msg, gi.var_msg_rows), gi.to_clause), clause_scale)
        # query: how unsatisfied is each clause under the soft assignment
        q = ad.sigmoid(ad.add_row(ad.matmul(h_v, p["query.W"]), p["query.b"]))
        falsity = ad.add(falsity_offset, ad.mul(ad.gather(q, gi.edge_vars), falsity_sign))
        unsat = ad.segment_prod(falsity, gi.to_clause)
        delta_c = _mlp(ad.concat([c_in, unsat, h_c]), p["clause1.W"], p["clause1.b"],
                       p["clause2.W"], p["clause2.b"])
        h_c = ad.layer_norm(ad.add(h_c, delta_c), p["clause_norm.g"], p["clause_norm.b"])
        # clauses -> variables
        c_msg = ad.reshape(ad.matmul(h_c, p["c2v.W"]), (2 * m, d))
        v_in = ad.mul(ad.segment_sum(ad.gather(c_msg, gi.clause_msg_rows), gi.to_var), var_scale)
        hidden = ad.relu(ad.add(ad.matmul(ad.concat([v_in, h_v]), p["var1.W"]), static_v))
        delta_v = ad.add_row(ad.matmul(hidden, p["var2.W"]), p["var2.b"])
        h_v = ad.layer_norm(ad.add(h_v, delta_v), p["var_norm.g"], p["var_norm.b"])

    logits = ad.add_row(ad.matmul(h_v, p["out.W"]), p["out.b"])
    return logits if return_logits else ad.softmax(logits)


def clause_unsat(model: DenoiserModel, fg: FactorGraph, q_values: np.ndarray) -> np.ndarray:
    """Unsatisfiedness per clause for given soft values (num_vars, queries); for inspection."""
    gi = GraphIndex(fg)
    qd = np.asarray(q_values, dtype=np.float64)
    falsity = gi.falsity_offset + gi.falsity_sign * qd[fg.var_index]
    with ad.no_grad():
        return ad.segment_prod(ad.Tensor(falsity), gi.to_clause).data


class GnnDenoiser:
    """Adapts a model to the (graph, x_t, alpha_bar) denoiser protocol."""

    def __init__(self, model: DenoiserModel):
        self.model = model
        self._index: GraphIndex | None = None

    def __call__(self, graph: FactorGraph, x_t: np.ndarray, alpha_bar) -> np.ndarray:
        if self._index is None or self._index.fg is not graph:
            self._index = GraphIndex(graph)
        with ad.no_grad():
            return forward(self.model, self._index, x_t, alpha_bar).data.astype(np.float64)


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(model: DenoiserModel, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the binary checkpoint.

    Layout (little-endian): magic "DSAT", u32 version, u32 d, u32 R, u32 T,
    u32 queries, u64 step, u32 record count, then per record: u16 name length,
    utf-8 name, u8 rank, rank x u32 dims, float32 values.
    """
    records = {name: t.data for name, t in model.params.items()}
    for name, arr in (extra if extra is not None else model.extra).items():
        records[name] = arr
    buf = io.BytesIO()
    c = model.config
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIIIQI", FORMAT_VERSION, c.d, c.R, model.T, c.queries,
                          model.step, len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint(path, config: ModelConfig | None = None) -> DenoiserModel:
    """Read a checkpoint; records not named like model parameters land in ``extra``.

    If ``config`` is given, its d/R/queries must match and every tensor must
    have the shape that config implies.
    """
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, d, R, T, queries, step, count = struct.unpack("<IIIIIQI", _read(fh, 32))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        records = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            records[name] = np.frombuffer(_read(fh, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last record")

    stored = ModelConfig(d=d, R=R, queries=queries, seed=config.seed if config else 0)
    target = config or stored
    expected = parameter_shapes(target)
    for name, shape in expected.items():
        if name not in records:
            raise CheckpointError(f"missing tensor {name!r}")
        if records[name].shape != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {records[name].shape}, config expects {shape}"
            )
    if config is not None and (config.d, config.R, config.queries) != (d, R, queries):
        raise CheckpointError(
            f"checkpoint config d={d}, R={R}, queries={queries} does not match requested "
            f"d={config.d}, R={config.R}, queries={config.queries}"
        )
    params = {name: ad.parameter(records[name], name=name) for name in expected}
    extra = {k: v for k, v in records.items() if k not in expected}
    return DenoiserModel(target, params, step=step, T=T, extra=extra)
