"""Multi-task loop refinement network.

Each iteration re-weights the node features of every loop with its own
convolutional soft mask, encodes the masked graph with a sequence-side
message-passing network to predict the next residue, then encodes it again
with a structure-side network (now knowing that residue) to emit fresh
coordinates for every residue. The graph is rebuilt from those coordinates
before the next iteration.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import AMINO_ACIDS, UNKNOWN_RESIDUE, AntibodyRecord, LoopBundle, bundle_loops
from .graph import EDGE_DIM, NODE_DIM, LoopGraph, build_graph, partition_nodes
from .tensor import Tensor

ATOM_HEADS = ("a", "c", "n")  # CA, C, N
CA_SPACING = 3.8
# fixed N and C offsets from CA for the straight-line starting chain
_N_OFFSET = np.array([-1.0, 0.9, 0.3])
_C_OFFSET = np.array([1.0, 0.9, -0.3])

MODES = ("teacher_forced", "generative")
ATTENTION_MODES = ("loop", "none", "replace")


@dataclass
class ModelConfig:
    z: int = 2
    q: int = 2
    layers: int = 4
    hidden: int = 256
    k_neighbors: int = 8
    attention: str = "loop"
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not 1 <= self.z:
            raise ValueError(f"kernel size z must be >= 1, got {self.z}")
        if self.q < 1:
            raise ValueError(f"need at least one convolution stage, got q={self.q}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be positive")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")

    def to_dict(self):
        return asdict(self)


def init_params(config, seed=0):
    """Named parameter tensors, drawn from a seeded generator in a fixed order."""
    rng = np.random.default_rng(seed)
    H, z = config.hidden, config.z

    def dense(fan_in, fan_out):
        return T.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))

    def zeros(*shape):
        return T.parameter(np.zeros(shape))

    p = {}
    for k in (1, 2, 3):
        for s in range(config.q):
            p[f"att.{k}.{s}.kernel"] = T.parameter(rng.normal(0.0, 1.0 / z, size=(1, 1, z, z)))
            p[f"att.{k}.{s}.gamma"] = T.parameter(np.ones(1))
            p[f"att.{k}.{s}.beta"] = zeros(1)
    for side in ("seq", "struct"):
        p[f"mpn.{side}.embed_w"] = dense(NODE_DIM, H)
        p[f"mpn.{side}.embed_b"] = zeros(H)
        p[f"mpn.{side}.residue"] = T.parameter(rng.normal(0.0, 1.0, size=(UNKNOWN_RESIDUE + 1, H)))
        for layer in range(config.layers):
            p[f"mpn.{side}.{layer}.msg_w"] = dense(H + EDGE_DIM, H)
            p[f"mpn.{side}.{layer}.msg_b"] = zeros(H)
            p[f"mpn.{side}.{layer}.upd_w"] = dense(2 * H, H)
            p[f"mpn.{side}.{layer}.upd_b"] = zeros(H)
    p["head.seq"] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, len(AMINO_ACIDS))))
    for f in ATOM_HEADS:
        p[f"head.x.{f}"] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, 3)))
    return p


# -- attention ------------------------------------------------------------------


def loop_attention(vk, params, k, config):
    """Soft mask in [0, 1] with the shape of one loop's node features.

    The [r_k x d] block is treated as a one-channel image. All stages but the
    last are conv, batch norm, ReLU; the last is conv, batch norm, sigmoid.
    """
    rows, cols = vk.shape
    x = vk.reshape(1, rows, cols)
    for s in range(config.q):
        y = T.conv2d(x, params[f"att.{k}.{s}.kernel"])
        y = T.batch_norm(y.reshape(rows * cols, 1), params[f"att.{k}.{s}.gamma"], params[f"att.{k}.{s}.beta"], config.bn_eps)
        y = y.reshape(1, rows, cols)
        x = T.relu(y) if s < config.q - 1 else T.sigmoid(y)
    return x.reshape(rows, cols)


def fuse_masks(masks, V, lengths, mode="loop"):
    """Reassemble the per-loop masks into new node features.

    ``loop`` weights each block of V by its mask; ``replace`` uses the masks
    themselves as the features.
    """
    starts = np.cumsum((0,) + tuple(lengths[:-1]))
    if len(masks) != len(lengths) or sum(lengths) != V.shape[0]:
        raise ValueError(f"loop lengths {tuple(lengths)} do not partition {V.shape[0]} rows")
    blocks = []
    for m, start, size in zip(masks, starts, lengths):
        if m.shape != (size, V.shape[1]):
            raise ValueError(f"mask of shape {m.shape} does not match block ({size}, {V.shape[1]})")
        blocks.append(m if mode == "replace" else m * V[start : start + size])
    return T.concat(blocks, axis=0)


def attend(graph, params, config):
    """Graph whose node features are modulated by the three loop masks."""
    if config.attention == "none":
        return graph
    masks = [loop_attention(vk, params, k, config) for k, vk in zip((1, 2, 3), partition_nodes(graph))]
    return graph.with_nodes(fuse_masks(masks, graph.V, graph.lengths, config.attention))


# -- message passing --------------------------------------------------------------


def _mean_matrix(src, num_nodes):
    agg = np.zeros((num_nodes, len(src)))
    if len(src):
        counts = np.bincount(src, minlength=num_nodes).astype(float)
        agg[src, np.arange(len(src))] = 1.0 / counts[src]
    return agg


def mpn_encode(graph, params, which, residue_ids, layers):
    """Hidden states [r x H] from ``layers`` rounds of mean-aggregated messages.

    ``residue_ids`` holds the amino-acid index of residues already decided and
    ``UNKNOWN_RESIDUE`` elsewhere. Node i receives one message per edge
    (i, j): ReLU(W_msg [h_j | e_ij]).
    """
    pre = f"mpn.{which}"
    h = T.matmul(graph.V, params[f"{pre}.embed_w"]) + params[f"{pre}.embed_b"]
    h = h + T.take_rows(params[f"{pre}.residue"], residue_ids)
    agg = _mean_matrix(graph.src, graph.num_nodes)
    for layer in range(layers):
        msg_in = T.concat([T.take_rows(h, graph.dst), graph.E], axis=1)
        msg = T.relu(T.matmul(msg_in, params[f"{pre}.{layer}.msg_w"]) + params[f"{pre}.{layer}.msg_b"])
        pooled = T.matmul(Tensor(agg), msg)
        h = T.relu(T.matmul(T.concat([h, pooled], axis=1), params[f"{pre}.{layer}.upd_w"]) + params[f"{pre}.{layer}.upd_b"])
    return h


def predict_residue(h_next, params):
    """(probabilities, log-probabilities, argmax) over the 20 amino acids for one hidden row."""
    logits = T.matmul(h_next.reshape(1, -1), params["head.seq"]).reshape(-1)
    log_probs = T.log_softmax(logits)
    probs = T.softmax(logits)
    return probs, log_probs, int(np.argmax(probs.data))


def predict_coords(h, params):
    """New (N, CA, C) coordinates for every residue, one linear head per atom type."""
    ca = T.matmul(h, params["head.x.a"])
    c = T.matmul(h, params["head.x.c"])
    n = T.matmul(h, params["head.x.n"])
    return n, ca, c


# -- refinement -------------------------------------------------------------------


def initial_coords(length):
    """Straight chain along +x with 3.8 A CA spacing, starting at the origin."""
    ca = np.zeros((length, 3))
    ca[:, 0] = CA_SPACING * np.arange(length)
    return ca + _N_OFFSET, ca, ca + _C_OFFSET


@dataclass
class RefinementState:
    t: int
    residues: list  # decided residue indices, length t
    n: Tensor
    ca: Tensor
    c: Tensor
    graph: LoopGraph
    h: Tensor | None = None


@dataclass
class StepOutput:
    probs: Tensor
    log_probs: Tensor
    predicted: int
    n: Tensor
    ca: Tensor
    c: Tensor


@dataclass
class Refinement:
    sequence: str
    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray
    trace: list = field(default_factory=list)
    bundle: LoopBundle | None = None


def initial_state(lengths, config):
    n, ca, c = (Tensor(a) for a in initial_coords(sum(lengths)))
    return RefinementState(0, [], n, ca, c, build_graph(n, ca, c, lengths, config.k_neighbors))


def _ids(residues, size):
    ids = np.full(size, UNKNOWN_RESIDUE, dtype=np.intp)
    ids[: len(residues)] = residues
    return ids


def refine_step(state, params, config, mode="teacher_forced", ground=None):
    """Advance one residue: returns the next state and this step's predictions."""
    graph = state.graph
    r = graph.num_nodes
    if state.t >= r:
        raise ValueError(f"refinement already finished: t={state.t} with {r} residues")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "teacher_forced" and ground is None:
        raise ValueError("teacher-forced refinement needs the ground-truth residues")

    attended = attend(graph, params, config)
    h_seq = mpn_encode(attended, params, "seq", _ids(state.residues, r), config.layers)
    probs, log_probs, predicted = predict_residue(h_seq[state.t], params)
    chosen = int(ground[state.t]) if mode == "teacher_forced" else predicted
    residues = state.residues + [chosen]

    h_half = mpn_encode(attended, params, "struct", _ids(residues, r), config.layers)
    n, ca, c = predict_coords(h_half, params)
    new_graph = build_graph(n, ca, c, graph.lengths, config.k_neighbors)
    nxt = RefinementState(state.t + 1, residues, n, ca, c, new_graph, h_half)
    return nxt, StepOutput(probs, log_probs, predicted, n, ca, c)


def run_refinement(source, params, config, mode="teacher_forced"):
    """Refine every residue of a record's (or bundle's) three loops in order."""
    bundle = bundle_loops(source) if isinstance(source, AntibodyRecord) else source
    ground = bundle.residue_ids if mode == "teacher_forced" else None
    state = initial_state(bundle.lengths, config)
    trace = []
    for _ in range(len(bundle)):
        state, out = refine_step(state, params, config, mode, ground)
        trace.append(out)
    seq = "".join(AMINO_ACIDS[i] for i in state.residues)
    return Refinement(seq, state.n.data.copy(), state.ca.data.copy(), state.c.data.copy(), trace, bundle)
