"""Graph-attention Q network over a dynamic agent graph.

Per agent: a shared MLP encodes the local observation into a feature vector,
stacked convolution layers mix each agent's features with its (up to
`neighbor_limit`) nearest neighbors via multi-head dot-product attention, all
layer outputs are concatenated densely, and a single affine head maps the
concatenation to action values. One ParamSet serves every agent regardless of
the agent count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy import sparse

from .autodiff import (
    ParamSet,
    StructuralError,
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

MASK_NEG = -1e30  # additive logit mask; exp underflows to exactly 0


@dataclass
class ModelConfig:
    obs_dim: int
    n_actions: int
    encoder_units: tuple = (512, 128)
    feature_dim: int = 128
    conv_layers: int = 2
    attention_heads: int = 8
    head_dim: int = 16
    tau: float = 0.25
    kernel: str = "attention"  # or "mean"
    reg_layer: int = 2
    neighbor_limit: int = 3
    init_std: float = 0.05

    def __post_init__(self):
        if self.encoder_units[-1] != self.feature_dim:
            raise StructuralError("encoder output width must equal feature_dim")
        if self.conv_layers > 0 and self.attention_heads * self.head_dim != self.feature_dim:
            raise StructuralError("heads * head_dim must equal feature_dim")
        if self.conv_layers < 0:
            raise StructuralError("conv_layers must be >= 0")
        if self.conv_layers > 0 and not 1 <= self.reg_layer <= self.conv_layers:
            raise StructuralError("reg_layer must name an existing conv layer")
        if self.kernel not in ("attention", "mean"):
            raise StructuralError(f"unknown kernel {self.kernel!r}")
        if self.obs_dim <= 0 or self.n_actions <= 0 or self.neighbor_limit < 0:
            raise StructuralError("obs_dim, n_actions positive; neighbor_limit >= 0")

    @property
    def q_input_dim(self) -> int:
        return self.feature_dim * (1 + self.conv_layers)

    def schema(self) -> str:
        return (f"gqn:obs{self.obs_dim}:act{self.n_actions}"
                f":enc{'x'.join(map(str, self.encoder_units))}"
                f":conv{self.conv_layers}:heads{self.attention_heads}x{self.head_dim}"
                f":kernel-{self.kernel}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_units"] = list(self.encoder_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_units"] = tuple(d["encoder_units"])
        return cls(**d)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Random-normal weights (std from config), zero biases."""
    std = config.init_std

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    def b(n):
        return Tensor(np.zeros(n))

    u1, u2 = config.encoder_units
    L = config.feature_dim
    md = config.attention_heads * config.head_dim
    params = {
        "enc.w1": w(config.obs_dim, u1), "enc.b1": b(u1),
        "enc.w2": w(u1, u2), "enc.b2": b(u2),
    }
    for layer in range(1, config.conv_layers + 1):
        if config.kernel == "attention":
            params[f"conv{layer}.wq"] = w(L, md)
            params[f"conv{layer}.wk"] = w(L, md)
        params[f"conv{layer}.wv"] = w(L, md)
        params[f"conv{layer}.mix.w"] = w(md, L)
        params[f"conv{layer}.mix.b"] = b(L)
    params["q.w"] = w(config.q_input_dim, config.n_actions)
    params["q.b"] = b(config.n_actions)
    return ParamSet(config.schema(), params)


# ---------------------------------------------------------------------------
# adjacency
# ---------------------------------------------------------------------------

def build_adjacency(self_index: int, neighbor_indices, n_agents: int) -> np.ndarray:
    """One-hot row-selector matrix: row 0 picks the agent, rows 1..k its neighbors.

    Multiplying this (k+1) x N matrix with the N x L feature matrix gathers
    the agent's local feature block.
    """
    ids = [self_index, *neighbor_indices]
    if any(not 0 <= i < n_agents for i in ids):
        raise StructuralError("adjacency index out of range")
    if self_index in neighbor_indices:
        raise StructuralError("agent listed as its own neighbor")
    c = np.zeros((len(ids), n_agents))
    c[np.arange(len(ids)), ids] = 1.0
    return c


class GatherPlan:
    """Precomputed batched gather for one stacked forward pass.

    For R agent-rows with padded neighborhood width K, `idx[r*K + k]` is the
    global row of the k-th member of row r's neighborhood (self first, then
    neighbors in stored order; missing slots repeat self and are masked out of
    the attention softmax). The same plan serves every conv layer and both the
    current and next observations of a transition (the stored graph is reused).
    """

    def __init__(self, neighbor_rows, width: int):
        """`neighbor_rows[r]` holds global row indices of row r's neighbors."""
        rows = len(neighbor_rows)
        self.rows = rows
        self.width = width
        idx = np.empty(rows * width, dtype=np.int64)
        mask = np.zeros((rows, 1, 1, width))
        counts = np.empty(rows, dtype=np.int64)
        for r, nbrs in enumerate(neighbor_rows):
            if len(nbrs) > width - 1:
                raise StructuralError("neighbor list exceeds plan width")
            base = r * width
            idx[base] = r
            for k, j in enumerate(nbrs):
                idx[base + 1 + k] = j
            for k in range(len(nbrs) + 1, width):
                idx[base + k] = r
            mask[r, 0, 0, len(nbrs) + 1:] = MASK_NEG
            counts[r] = len(nbrs) + 1
        self.idx = idx
        self.mask = mask
        self.counts = counts
        self.uniform = np.where(mask == 0.0, 1.0, 0.0) / counts[:, None, None, None]
        ones = np.ones(rows * width)
        self._scatter_mat = sparse.csr_matrix(
            (ones, (idx, np.arange(rows * width))), shape=(rows, rows * width))

    def scatter(self, grad: np.ndarray) -> np.ndarray:
        return np.asarray(self._scatter_mat @ grad)

    @classmethod
    def stack(cls, per_sample_neighbors, width: int) -> "GatherPlan":
        """Stack per-sample neighbor lists into one block-diagonal plan."""
        shifted = []
        offset = 0
        for lists in per_sample_neighbors:
            for nbrs in lists:
                shifted.append(tuple(j + offset for j in nbrs))
            offset += len(lists)
        return cls(shifted, width)


def plan_for_graph(neighbor_lists, width: int) -> GatherPlan:
    """Plan for a single timestep's graph (one sample)."""
    return GatherPlan.stack([neighbor_lists], width)


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    q: Tensor | None
    features: list
    attention: list  # per layer: Tensor of shape (rows, heads, width)


class GraphQNetwork:
    """Stateless evaluator binding a ModelConfig to forward passes."""

    def __init__(self, config: ModelConfig):
        self.config = config

    def forward(self, obs: np.ndarray, plan: GatherPlan | None, params: ParamSet,
                upto_layer: int | None = None, want_q: bool = True) -> ForwardResult:
        """Evaluate Q values and attention maps for a stack of agent rows.

        `obs` is (rows, obs_dim); `plan` describes the neighborhoods of those
        rows (may be None when conv_layers == 0). `upto_layer` stops after
        that conv layer (used to fetch regularization targets cheaply).
        """
        cfg = self.config
        if obs.ndim != 2 or obs.shape[1] != cfg.obs_dim:
            raise StructuralError(f"expected observations (rows, {cfg.obs_dim})")
        rows = obs.shape[0]
        M, d, K = cfg.attention_heads, cfg.head_dim, (plan.width if plan else 0)

        x = Tensor(obs)
        h = relu(add(matmul(x, params["enc.w1"]), params["enc.b1"]))
        h = relu(add(matmul(h, params["enc.w2"]), params["enc.b2"]))

        features = [h]
        attention = []
        for layer in range(1, cfg.conv_layers + 1):
            if plan is None:
                raise StructuralError("conv layers require a gather plan")
            prev = features[-1]
            if cfg.kernel == "attention":
                q = reshape(matmul(prev, params[f"conv{layer}.wq"]), (rows, M, 1, d))
                k_all = matmul(prev, params[f"conv{layer}.wk"])
                k_loc = transpose(
                    reshape(gather_rows(k_all, plan.idx, plan.scatter), (rows, K, M, d)),
                    (0, 2, 3, 1))  # (rows, M, d, K)
                logits = add(scale(matmul(q, k_loc), cfg.tau), Tensor(plan.mask))
                alpha = softmax_rows(logits)  # (rows, M, 1, K)
            else:
                alpha = Tensor(np.broadcast_to(plan.uniform, (rows, M, 1, K)).copy())
            v_all = matmul(prev, params[f"conv{layer}.wv"])
            v_loc = transpose(
                reshape(gather_rows(v_all, plan.idx, plan.scatter), (rows, K, M, d)),
                (0, 2, 1, 3))  # (rows, M, K, d)
            mixed = reshape(matmul(alpha, v_loc), (rows, M * d))
            out = relu(add(matmul(mixed, params[f"conv{layer}.mix.w"]),
                           params[f"conv{layer}.mix.b"]))
            features.append(out)
            attention.append(reshape(alpha, (rows, M, K)))
            if upto_layer is not None and layer == upto_layer:
                return ForwardResult(None, features, attention)

        qv = None
        if want_q:
            qin = features[0] if cfg.conv_layers == 0 else concat(features, axis=1)
            qv = add(matmul(qin, params["q.w"]), params["q.b"])
        return ForwardResult(qv, features, attention)

    def q_values(self, obs: np.ndarray, neighbor_lists, params: ParamSet) -> np.ndarray:
        """Off-tape Q evaluation for one timestep (action selection)."""
        plan = None
        if self.config.conv_layers > 0:
            plan = plan_for_graph(neighbor_lists, self.config.neighbor_limit + 1)
        return self.forward(obs, plan, params).q.data

    def attention_maps(self, obs: np.ndarray, plan: GatherPlan, params: ParamSet,
                       layer: int) -> np.ndarray:
        """Off-tape attention distributions of one conv layer, shape (rows, M, K)."""
        res = self.forward(obs, plan, params, upto_layer=layer, want_q=False)
        return res.attention[layer - 1].data


# ---------------------------------------------------------------------------
# per-agent reference path (unbatched, used by tests and for inspection)
# ---------------------------------------------------------------------------

def encode_observation(obs_vec: np.ndarray, params: ParamSet, config: ModelConfig) -> np.ndarray:
    """Two affine layers with ReLU mapping one observation to a feature vector."""
    obs_vec = np.asarray(obs_vec, dtype=np.float64)
    if obs_vec.shape != (config.obs_dim,):
        raise StructuralError(f"expected observation of length {config.obs_dim}")
    h = np.maximum(obs_vec @ params["enc.w1"].data + params["enc.b1"].data, 0.0)
    return np.maximum(h @ params["enc.w2"].data + params["enc.b2"].data, 0.0)


def attention_weights(local_features: np.ndarray, wq_m: np.ndarray, wk_m: np.ndarray,
                      tau: float) -> np.ndarray:
    """Single-head relation weights of the first row against every row.

    `local_features` is the (k+1) x L gathered block with the agent itself in
    row 0; the result is a probability vector over those rows.
    """
    local = np.asarray(local_features, dtype=np.float64)
    if local.ndim != 2 or local.shape[0] == 0:
        raise StructuralError("local features must be a non-empty matrix")
    q = local[0] @ wq_m
    k = local @ wk_m
    logits = tau * (k @ q)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def conv_forward(local_features: np.ndarray, layer_params: dict, tau: float,
                 heads: int, head_dim: int):
    """One agent through one attention-kernel conv layer.

    Returns (output feature vector, per-head weight rows of shape (M, k+1)).
    `layer_params` maps 'wq'/'wk'/'wv'/'mix.w'/'mix.b' to arrays whose head
    blocks are contiguous column groups of width `head_dim`.
    """
    local = np.asarray(local_features, dtype=np.float64)
    if local.ndim != 2 or local.shape[0] == 0:
        raise StructuralError("local features must be a non-empty matrix")
    pieces = []
    alphas = np.empty((heads, local.shape[0]))
    for m in range(heads):
        cols = slice(m * head_dim, (m + 1) * head_dim)
        alpha = attention_weights(local, layer_params["wq"][:, cols],
                                  layer_params["wk"][:, cols], tau)
        alphas[m] = alpha
        pieces.append(alpha @ (local @ layer_params["wv"][:, cols]))
    mixed = np.concatenate(pieces)
    out = np.maximum(mixed @ layer_params["mix.w"] + layer_params["mix.b"], 0.0)
    return out, alphas


def mean_kernel_forward(local_features: np.ndarray, layer_params: dict,
                        heads: int, head_dim: int) -> np.ndarray:
    """Like conv_forward but with uniform weights over the local block."""
    local = np.asarray(local_features, dtype=np.float64)
    if local.ndim != 2 or local.shape[0] == 0:
        raise StructuralError("local features must be a non-empty matrix")
    alpha = np.full(local.shape[0], 1.0 / local.shape[0])
    pieces = []
    for m in range(heads):
        cols = slice(m * head_dim, (m + 1) * head_dim)
        pieces.append(alpha @ (local @ layer_params["wv"][:, cols]))
    mixed = np.concatenate(pieces)
    return np.maximum(mixed @ layer_params["mix.w"] + layer_params["mix.b"], 0.0)


def layer_param_views(params: ParamSet, layer: int) -> dict:
    """Convenience: the raw arrays of one conv layer for the reference path."""
    out = {"wv": params[f"conv{layer}.wv"].data,
           "mix.w": params[f"conv{layer}.mix.w"].data,
           "mix.b": params[f"conv{layer}.mix.b"].data}
    if f"conv{layer}.wq" in params:
        out["wq"] = params[f"conv{layer}.wq"].data
        out["wk"] = params[f"conv{layer}.wk"].data
    return out


# ---------------------------------------------------------------------------
# parameter container (versioned, bit-exact round trip)
# ---------------------------------------------------------------------------

_PARAMS_MAGIC = b"GQNP"
_PARAMS_VERSION = 1


def write_params(buf, params: ParamSet, config: ModelConfig):
    """Serialize name/shape metadata as JSON, values as raw little-endian f64."""
    header = {
        "version": _PARAMS_VERSION,
        "schema": params.schema,
        "config": config.to_dict(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(_PARAMS_MAGIC)
    buf.write(len(raw).to_bytes(8, "little"))
    buf.write(raw)
    for _, t in params.items():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_params(buf):
    """Inverse of write_params; returns (ParamSet, ModelConfig)."""
    magic = buf.read(4)
    if magic != _PARAMS_MAGIC:
        raise StructuralError("not a parameter container")
    size = int.from_bytes(buf.read(8), "little")
    header = json.loads(buf.read(size).decode("utf-8"))
    if header["version"] != _PARAMS_VERSION:
        raise StructuralError(f"unsupported container version {header['version']}")
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(count * 8), dtype="<f8").reshape(shape)
        params[entry["name"]] = Tensor(data.copy())
    return ParamSet(header["schema"], params), config


def save_params(path, params: ParamSet, config: ModelConfig):
    with open(path, "wb") as f:
        write_params(f, params, config)


def load_params(path):
    with open(path, "rb") as f:
        return read_params(f)
