"""Per-position potential scoring for every supported family.

A model scores each (previous label, current label) pair at every position
of a sentence; the scores for one sentence form an M x L x L lattice.
Inference runs on the lattice alone, so a family only has to know how to
build lattices and how to push lattice-level gradients back onto its own
parameters.

Label indexing.  The L real labels are 0..L-1.  A synthetic
begin-of-sequence (BOS) label occupies row L of the label-embedding table
and of the vanilla transition table.  Position 0 of every lattice is
scored against BOS, all of its rows carry the same value, and inference
reads row 0 there by convention.

Boundary words.  Families whose potential multiplies in a factor of the
previous or next word representation (d-quadrilinear, d-pentalinear)
treat an out-of-range neighbor as a ones factor, so the boundary
positions degrade to the next-lower-order potential instead of vanishing.
The concat-MLP families instead concatenate the all-zero boundary vector
carried by the representation sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import glorot, make_rng


class Family(str, Enum):
    """Closed set of potential-function families."""

    SOFTMAX = "softmax"
    VANILLA_CRF = "vanilla-crf"
    TWO_BILINEAR = "two-bilinear"
    THREE_BILINEAR = "three-bilinear"
    TRILINEAR = "trilinear"
    D_TRILINEAR = "d-trilinear"
    D_QUADRILINEAR = "d-quadrilinear"
    D_PENTALINEAR = "d-pentalinear"
    CONCAT_MLP_1W2L = "concat-mlp-1w2l"
    CONCAT_MLP_2W2L = "concat-mlp-2w2l"

    @classmethod
    def from_name(cls, name: str) -> "Family":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError("unknown family: %s" % name) from None


CRF_FAMILIES = tuple(f for f in Family if f is not Family.SOFTMAX)

# Families whose potential reads the label-embedding table.
EMBEDDING_FAMILIES = frozenset(
    f for f in Family if f not in (Family.SOFTMAX, Family.VANILLA_CRF)
)

# Canonical parameter order, also the serialization and update order.
PARAM_FIELDS = (
    "label_embeddings",
    "transition_table",
    "w_h",
    "w_t",
    "w_h1",
    "w_h2",
    "u_dense",
    "u_t1",
    "u_t2",
    "u_h",
    "u_h1",
    "u_h2",
    "u_h3",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
)


@dataclass
class RepresentationSequence:
    """Per-token dense vectors h_1..h_M plus all-zero boundary vectors."""

    h: np.ndarray       # (M, d_h)
    h_pre: np.ndarray   # (d_h,), zeros; stands in for the word before the sentence
    h_post: np.ndarray  # (d_h,), zeros; stands in for the word after the sentence

    @classmethod
    def from_array(cls, h) -> "RepresentationSequence":
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1:
            raise ValueError("representations must be a non-empty (M, d_h) array")
        zero = np.zeros(h.shape[1])
        return cls(h=h, h_pre=zero, h_post=zero.copy())

    @property
    def length(self) -> int:
        return self.h.shape[0]

    @property
    def d_h(self) -> int:
        return self.h.shape[1]


def field_shapes(family, num_labels, d_h, d_t=0, d_r=0, mlp_hidden=0):
    """Required parameter shapes for `family`, in canonical order."""
    family = Family(family)
    L = num_labels
    shapes: dict[str, tuple] = {}
    if family is Family.SOFTMAX:
        shapes["w_h"] = (d_h, L)
    elif family is Family.VANILLA_CRF:
        shapes["transition_table"] = (L + 1, L)
        shapes["w_h"] = (d_h, L)
    elif family is Family.TWO_BILINEAR:
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["w_h"] = (d_h, d_t)
        shapes["w_t"] = (d_t, d_t)
    elif family is Family.THREE_BILINEAR:
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["w_t"] = (d_t, d_t)
        shapes["w_h1"] = (d_h, d_t)
        shapes["w_h2"] = (d_h, d_t)
    elif family is Family.TRILINEAR:
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["u_dense"] = (d_h, d_t, d_t)
    elif family is Family.D_TRILINEAR:
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["u_t1"] = (d_t, d_r)
        shapes["u_t2"] = (d_t, d_r)
        shapes["u_h"] = (d_h, d_r)
    elif family is Family.D_QUADRILINEAR:
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["u_t1"] = (d_t, d_r)
        shapes["u_t2"] = (d_t, d_r)
        shapes["u_h1"] = (d_h, d_r)
        shapes["u_h2"] = (d_h, d_r)
    elif family is Family.D_PENTALINEAR:
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["u_t1"] = (d_t, d_r)
        shapes["u_t2"] = (d_t, d_r)
        shapes["u_h1"] = (d_h, d_r)
        shapes["u_h2"] = (d_h, d_r)
        shapes["u_h3"] = (d_h, d_r)
    elif family in (Family.CONCAT_MLP_1W2L, Family.CONCAT_MLP_2W2L):
        words = 1 if family is Family.CONCAT_MLP_1W2L else 2
        d_in = words * d_h + 2 * d_t
        shapes["label_embeddings"] = (L + 1, d_t)
        shapes["mlp_w1"] = (mlp_hidden, d_in)
        shapes["mlp_b1"] = (mlp_hidden,)
        shapes["mlp_w2"] = (1, mlp_hidden)
    return shapes


@dataclass
class ModelParams:
    """Weights of one potential family.

    Only the fields demanded by `family` are populated; everything else
    stays None.  Row L of `label_embeddings` and of `transition_table` is
    the synthetic BOS label.
    """

    family: Family
    num_labels: int
    d_h: int
    d_t: int = 0
    d_r: int = 0
    label_embeddings: np.ndarray | None = None
    transition_table: np.ndarray | None = None
    w_h: np.ndarray | None = None
    w_t: np.ndarray | None = None
    w_h1: np.ndarray | None = None
    w_h2: np.ndarray | None = None
    u_dense: np.ndarray | None = None
    u_t1: np.ndarray | None = None
    u_t2: np.ndarray | None = None
    u_h: np.ndarray | None = None
    u_h1: np.ndarray | None = None
    u_h2: np.ndarray | None = None
    u_h3: np.ndarray | None = None
    mlp_w1: np.ndarray | None = None
    mlp_b1: np.ndarray | None = None
    mlp_w2: np.ndarray | None = None

    @property
    def mlp_hidden(self) -> int:
        return 0 if self.mlp_w1 is None else self.mlp_w1.shape[0]

    def expected_shapes(self):
        return field_shapes(
            self.family, self.num_labels, self.d_h, self.d_t, self.d_r,
            self.mlp_hidden,
        )

    def param_items(self):
        """(name, array) pairs for the populated fields, canonical order."""
        expected = self.expected_shapes()
        return [(name, getattr(self, name)) for name in PARAM_FIELDS if name in expected]

    def validate(self):
        expected = self.expected_shapes()
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            if name not in expected:
                if arr is not None:
                    raise ValueError("field %s must not be set for %s" % (name, self.family.value))
                continue
            if arr is None:
                raise ValueError("missing field: %s" % name)
            if arr.shape != expected[name]:
                raise ValueError(
                    "dimension mismatch for %s: got %r, want %r"
                    % (name, arr.shape, expected[name])
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter in %s" % name)

    def copy(self) -> "ModelParams":
        kw = {name: None if getattr(self, name) is None else getattr(self, name).copy()
              for name in PARAM_FIELDS}
        return ModelParams(
            family=self.family, num_labels=self.num_labels,
            d_h=self.d_h, d_t=self.d_t, d_r=self.d_r, **kw,
        )


@dataclass
class ParamGrad:
    """Gradient accumulator mirroring the populated fields of a ModelParams."""

    family: Family
    arrays: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ModelParams) -> "ParamGrad":
        return cls(params.family, {n: np.zeros_like(a) for n, a in params.param_items()})

    def scale(self, c: float) -> "ParamGrad":
        for a in self.arrays.values():
            a *= c
        return self

    def add(self, other: "ParamGrad") -> "ParamGrad":
        for name, a in other.arrays.items():
            self.arrays[name] += a
        return self

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays.values())))


# Number of multiplied factors per decomposed family.
_FACTOR_COUNT = {
    Family.D_TRILINEAR: 3,
    Family.D_QUADRILINEAR: 4,
    Family.D_PENTALINEAR: 5,
}


def init_params(family, num_labels, d_h, seed, d_t=0, d_r=0, mlp_hidden=128) -> ModelParams:
    """Seeded parameters for `family`; equal arguments give bit-identical
    models (arrays are drawn from one PCG64 stream in canonical field
    order).

    Most fields are Glorot uniform; the order-3 tensor uses
    fan = d_h + d_t * d_t and MLP biases start at zero.  The factor
    matrices of the decomposed k-linear families are instead scaled so
    that each factor has magnitude about d_r**(-1/(2k)) under unit-norm
    inputs: the k-way products then start near 1/sqrt(d_r) and their sum
    near unit scale, which a sum-oriented Glorot scale does not give
    (products of several Glorot-small factors make the loss surface
    nearly flat at the start of training and unstable later).
    Representation vectors are assumed to be of roughly unit norm.
    """
    family = Family(family)
    if family in (Family.SOFTMAX, Family.VANILLA_CRF):
        d_t = 0
        d_r = 0
    if family not in (Family.CONCAT_MLP_1W2L, Family.CONCAT_MLP_2W2L):
        mlp_hidden = 0
    shapes = field_shapes(family, num_labels, d_h, d_t, d_r, mlp_hidden)
    factors = _FACTOR_COUNT.get(family)
    bounds = {}
    if factors is not None:
        target = d_r ** (-1.0 / (2.0 * factors))
        # balance the label side: embedding rows and factor columns get
        # equal norms, so both move at the same relative rate under SGD
        side = np.sqrt(3.0 * target) * d_t ** -0.25
        bounds["label_embeddings"] = side
        bounds["u_t1"] = bounds["u_t2"] = side
        for name in ("u_h", "u_h1", "u_h2", "u_h3"):
            bounds[name] = np.sqrt(3.0) * target
    rng = make_rng(seed)
    kw = {}
    for name in PARAM_FIELDS:
        if name not in shapes:
            continue
        shape = shapes[name]
        if name == "mlp_b1":
            kw[name] = np.zeros(shape)
        elif name in bounds:
            kw[name] = rng.uniform(-bounds[name], bounds[name], size=shape)
        elif len(shape) == 3:
            a = np.sqrt(6.0 / (shape[0] + shape[1] * shape[2]))
            kw[name] = rng.uniform(-a, a, size=shape)
        else:
            rows, cols = shape if len(shape) == 2 else (1, shape[0])
            kw[name] = glorot(rng, rows, cols).reshape(shape)
    return ModelParams(family=family, num_labels=num_labels, d_h=d_h,
                       d_t=d_t, d_r=d_r, **kw)


def reconstruct_dense_trilinear(u_t1, u_t2, u_h) -> np.ndarray:
    """Dense order-3 tensor whose rank-d_r factors are the given matrices.

    U[p, q, r] = sum_j u_h[p, j] * u_t1[q, j] * u_t2[r, j].
    """
    if not (u_t1.shape[1] == u_t2.shape[1] == u_h.shape[1]):
        raise ValueError("factor matrices must share their column count")
    return np.einsum("pj,qj,rj->pqr", u_h, u_t1, u_t2, optimize=True)


# ---------------------------------------------------------------------------
# Lattice construction
# ---------------------------------------------------------------------------

def _precompute(params: ModelParams) -> dict:
    """Sequence-independent tensors for `params`, shared across a batch."""
    f = params.family
    pre: dict = {}
    if f in EMBEDDING_FAMILIES:
        T_ext = params.label_embeddings            # (L+1, d_t), row L = BOS
        T_cur = T_ext[: params.num_labels]         # BOS is never a current label
        pre["T_ext"] = T_ext
        pre["T_cur"] = T_cur
    if f in (Family.TWO_BILINEAR, Family.THREE_BILINEAR):
        pre["trans_ext"] = pre["T_ext"] @ params.w_t @ pre["T_cur"].T
    elif f is Family.TRILINEAR:
        # Fold label embeddings into the tensor: B[p, a*L+b].
        tmp = np.tensordot(pre["T_ext"], params.u_dense, axes=(1, 1))  # (L+1, d_h, d_t)
        folded = np.einsum("apr,br->pab", tmp, pre["T_cur"], optimize=True)
        pre["B"] = folded.reshape(params.d_h, -1)
    elif f in (Family.D_TRILINEAR, Family.D_QUADRILINEAR, Family.D_PENTALINEAR):
        L = params.num_labels
        G1 = pre["T_ext"] @ params.u_t1            # previous-label factors
        G2 = pre["T_cur"] @ params.u_t2            # current-label factors
        pre["G1"] = G1
        pre["G2"] = G2
        # pairwise label-factor products, split into the real-label block
        # and the BOS row so lattices can be written without an ext table
        pre["G12"] = (G1[:, None, :] * G2[None, :, :]).reshape(-1, params.d_r)
        pre["G12_cur"] = pre["G12"][: L * L]
        pre["G12_bos"] = pre["G12"][L * L:]
        if f is Family.D_TRILINEAR:
            pre["A_cur"] = params.u_h @ pre["G12_cur"].T   # (d_h, L*L)
            pre["A_bos"] = params.u_h @ pre["G12_bos"].T   # (d_h, L)
        elif f is Family.D_QUADRILINEAR:
            pre["u_words"] = (params.u_h1, params.u_h2)
        else:
            pre["u_words"] = (params.u_h1, params.u_h2, params.u_h3)
    elif f in (Family.CONCAT_MLP_1W2L, Family.CONCAT_MLP_2W2L):
        d_h, d_t = params.d_h, params.d_t
        w1 = params.mlp_w1
        words = 2 if f is Family.CONCAT_MLP_2W2L else 1
        pre["w1_words"] = w1[:, : words * d_h]
        pre["w1_prev_label"] = w1[:, words * d_h: words * d_h + d_t]
        pre["w1_cur_label"] = w1[:, words * d_h + d_t:]
        pre["Za"] = pre["T_ext"] @ pre["w1_prev_label"].T   # (L+1, H)
        pre["Zb"] = pre["T_cur"] @ pre["w1_cur_label"].T    # (L, H)
    return pre


def _stacked_spans(reps_list):
    spans = []
    start = 0
    for reps in reps_list:
        spans.append((start, start + reps.length))
        start += reps.length
    return spans


def _stacked_word_factors(params, pre, h_all, spans):
    """Word-factor vectors for sequences stacked along the position axis.

    Previous/next-word factors never leak across sequences; out-of-range
    neighbors produce a ones row so boundary positions keep a
    well-defined, trainable potential.
    """
    f = params.family
    if f is Family.D_TRILINEAR:
        return (h_all @ params.u_h,)
    d_r = params.d_r
    P1 = h_all @ pre["u_words"][0]
    G4 = h_all @ pre["u_words"][1]
    G3 = np.ones((h_all.shape[0], d_r))
    for s, e in spans:
        G3[s + 1: e] = P1[s: e - 1]
    if f is Family.D_QUADRILINEAR:
        return G3, G4
    P3 = h_all @ pre["u_words"][2]
    G5 = np.ones((h_all.shape[0], d_r))
    for s, e in spans:
        G5[s: e - 1] = P3[s + 1: e]
    return G3, G4, G5


def _mlp_hidden_units(params, pre, reps):
    """tanh hidden activations, shape (M, L+1, L, H)."""
    Zh = reps.h @ pre["w1_words"][:, -params.d_h:].T
    Z = (Zh[:, None, None, :]
         + pre["Za"][None, :, None, :]
         + pre["Zb"][None, None, :, :]
         + params.mlp_b1)
    if params.family is Family.CONCAT_MLP_2W2L:
        h_prev = np.vstack([reps.h_pre[None, :], reps.h[:-1]])
        Z = Z + (h_prev @ pre["w1_words"][:, : params.d_h].T)[:, None, None, :]
    return np.tanh(Z)


def _scores_ext(params, pre, reps) -> np.ndarray:
    """Scores as an (M, L+1, L) table; row L is the BOS previous label."""
    f = params.family
    M, L = reps.length, params.num_labels
    H = reps.h
    if f is Family.VANILLA_CRF:
        e = H @ params.w_h
        return params.transition_table[None, :, :] + e[:, None, :]
    if f in (Family.TWO_BILINEAR, Family.THREE_BILINEAR):
        w_cur = params.w_h if f is Family.TWO_BILINEAR else params.w_h1
        ext = pre["trans_ext"][None, :, :] + ((H @ w_cur) @ pre["T_cur"].T)[:, None, :]
        if f is Family.THREE_BILINEAR:
            ext = ext + ((H @ params.w_h2) @ pre["T_ext"].T)[:, :, None]
        return ext
    if f is Family.TRILINEAR:
        return (H @ pre["B"]).reshape(M, L + 1, L)
    if f in (Family.CONCAT_MLP_1W2L, Family.CONCAT_MLP_2W2L):
        U = _mlp_hidden_units(params, pre, reps)
        return U @ params.mlp_w2[0]
    raise AssertionError("unhandled family %r" % f)


def _lattices_decomposed(params, pre, reps_list):
    """Direct lattices for the decomposed families, one stacked matmul.

    All sequences are concatenated along the position axis so the heavy
    factor-product contraction runs as a single GEMM; each returned
    lattice is a view into the shared buffer.  Position 0 of every
    sequence is overwritten with its BOS-conditioned row broadcast."""
    L = params.num_labels
    h_all = np.vstack([reps.h for reps in reps_list])
    spans = _stacked_spans(reps_list)
    starts = [s for s, _ in spans]
    flat = np.empty((h_all.shape[0], L, L))
    if params.family is Family.D_TRILINEAR:
        np.matmul(h_all, pre["A_cur"], out=flat.reshape(-1, L * L))
        bos = h_all[starts] @ pre["A_bos"]
    else:
        # shifted in-place multiply; boundary rows keep the ones factor
        P1 = h_all @ pre["u_words"][0]
        W = h_all @ pre["u_words"][1]
        for s, e in spans:
            np.multiply(P1[s: e - 1], W[s + 1: e], out=W[s + 1: e])
        if params.family is Family.D_PENTALINEAR:
            P3 = h_all @ pre["u_words"][2]
            for s, e in spans:
                np.multiply(W[s: e - 1], P3[s + 1: e], out=W[s: e - 1])
        np.matmul(W, pre["G12_cur"].T, out=flat.reshape(-1, L * L))
        bos = W[starts] @ pre["G12_bos"].T
    for k, (s, e) in enumerate(spans):
        flat[s] = bos[k]
    return [flat[s:e] for s, e in spans]


def _check_reps(params, reps):
    if reps.d_h != params.d_h:
        raise ValueError(
            "dimension mismatch: representations have d_h=%d, model wants %d"
            % (reps.d_h, params.d_h)
        )


def score_lattices(params: ModelParams, reps_list) -> list:
    """Score lattices for a batch of sequences against one model.

    Sequence-independent work (label-side factor products, folded
    tensors) is done once per call, which is what makes decoding with the
    decomposed families nearly as cheap as with the vanilla CRF.
    """
    params.validate()
    pre = _precompute(params)
    L = params.num_labels
    for reps in reps_list:
        _check_reps(params, reps)
    if not reps_list:
        return []
    if params.family in (Family.D_TRILINEAR, Family.D_QUADRILINEAR,
                         Family.D_PENTALINEAR):
        return _lattices_decomposed(params, pre, reps_list)
    out = []
    for reps in reps_list:
        if params.family is Family.SOFTMAX:
            logits = reps.h @ params.w_h
            lat = np.empty((reps.length, L, L))
            lat[:] = logits[:, None, :]
        else:
            ext = _scores_ext(params, pre, reps)
            lat = np.empty((reps.length, L, L))
            lat[0] = ext[0, L]
            lat[1:] = ext[1:, :L, :]
        out.append(lat)
    return out


def score_lattice(params: ModelParams, reps: RepresentationSequence) -> np.ndarray:
    """Score lattice of a single sequence; see `score_lattices`."""
    return score_lattices(params, [reps])[0]


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------

def _grad_ext(lat_grad: np.ndarray, L: int) -> np.ndarray:
    """Lift an (M, L, L) lattice gradient onto the (M, L+1, L) ext table.

    All rows of lattice position 0 alias the BOS row of the ext table, so
    their gradients sum into ext row L.
    """
    M = lat_grad.shape[0]
    g = np.zeros((M, L + 1, L))
    g[0, L] = lat_grad[0].sum(axis=0)
    g[1:, :L] = lat_grad[1:]
    return g


def _accumulate_family(params, pre, reps, lat_grad, out):
    f = params.family
    L = params.num_labels
    H = reps.h
    g = out.arrays

    if f is Family.SOFTMAX:
        # every row of every position carries the same logit
        g["w_h"] += H.T @ lat_grad.sum(axis=1)
        return

    gext = _grad_ext(lat_grad, L)
    if f is Family.VANILLA_CRF:
        g["transition_table"] += gext.sum(axis=0)
        g["w_h"] += H.T @ gext.sum(axis=1)
        return

    T_ext, T_cur = pre["T_ext"], pre["T_cur"]
    if f in (Family.TWO_BILINEAR, Family.THREE_BILINEAR):
        total = gext.sum(axis=0)          # (L+1, L)
        gcol = gext.sum(axis=1)           # (M, L)
        g["w_t"] += T_ext.T @ total @ T_cur
        g["label_embeddings"] += total @ (T_cur @ params.w_t.T)
        g["label_embeddings"][:L] += total.T @ (T_ext @ params.w_t)
        if f is Family.TWO_BILINEAR:
            g["w_h"] += H.T @ (gcol @ T_cur)
            g["label_embeddings"][:L] += (gcol.T @ H) @ params.w_h
        else:
            grow = gext.sum(axis=2)       # (M, L+1)
            g["w_h1"] += H.T @ (gcol @ T_cur)
            g["w_h2"] += H.T @ (grow @ T_ext)
            g["label_embeddings"][:L] += (gcol.T @ H) @ params.w_h1
            g["label_embeddings"] += (grow.T @ H) @ params.w_h2
        return

    if f is Family.TRILINEAR:
        MM = np.einsum("mp,pqr->mqr", H, params.u_dense, optimize=True)
        g["u_dense"] += np.einsum(
            "mp,mab,aq,br->pqr", H, gext, T_ext, T_cur, optimize=True
        )
        g["label_embeddings"] += np.einsum(
            "mab,mqr,br->aq", gext, MM, T_cur, optimize=True
        )
        g["label_embeddings"][:L] += np.einsum(
            "mab,mqr,aq->br", gext, MM, T_ext, optimize=True
        )
        return

    if f in (Family.CONCAT_MLP_1W2L, Family.CONCAT_MLP_2W2L):
        U = _mlp_hidden_units(params, pre, reps)
        w2 = params.mlp_w2[0]
        dZ = gext[..., None] * (w2 * (1.0 - U * U))
        g["mlp_w2"][0] += np.einsum("mab,mabh->h", gext, U, optimize=True)
        g["mlp_b1"] += dZ.sum(axis=(0, 1, 2))
        Sh = dZ.sum(axis=(1, 2))
        Sa = dZ.sum(axis=(0, 2))
        Sb = dZ.sum(axis=(0, 1))
        d_h = params.d_h
        if f is Family.CONCAT_MLP_2W2L:
            h_prev = np.vstack([reps.h_pre[None, :], H[:-1]])
            g["mlp_w1"][:, :d_h] += Sh.T @ h_prev
            g["mlp_w1"][:, d_h: 2 * d_h] += Sh.T @ H
            off = 2 * d_h
        else:
            g["mlp_w1"][:, :d_h] += Sh.T @ H
            off = d_h
        g["mlp_w1"][:, off: off + params.d_t] += Sa.T @ T_ext
        g["mlp_w1"][:, off + params.d_t:] += Sb.T @ T_cur
        g["label_embeddings"] += Sa @ pre["w1_prev_label"]
        g["label_embeddings"][:L] += Sb @ pre["w1_cur_label"]
        return

    raise AssertionError("unhandled family %r" % f)


def _accumulate_decomposed(params, pre, reps_list, lat_grads, out):
    """Batched gradient pullback for the decomposed families.

    Sequences are stacked along the position axis, so every contraction
    that sums over positions and sequences runs as one GEMM.  Boundary
    neighbor factors are constant ones and contribute no gradient, which
    falls out of the all-zero rows of the shifted word matrices.
    """
    L = params.num_labels
    f = params.family
    g = out.arrays
    h_all = np.vstack([r.h for r in reps_list])
    spans = _stacked_spans(reps_list)
    total = h_all.shape[0]
    gext = np.zeros((total, L + 1, L))
    for (s, e), lg in zip(spans, lat_grads):
        gext[s, L] = lg[0].sum(axis=0)
        gext[s + 1: e, :L] = lg[1:]
    factors = _stacked_word_factors(params, pre, h_all, spans)
    W = factors[0]
    for extra in factors[1:]:
        W = W * extra
    G1, G2 = pre["G1"], pre["G2"]
    T_ext, T_cur = pre["T_ext"], pre["T_cur"]
    # base[m] = gamma[m] contracted with the label-factor products
    flat = gext.reshape(total, -1)
    base = flat @ pre["G12"]
    # Q[a, b, j] = sum over all positions of gamma[m, a, b] * W[m, j];
    # the transposed view feeds the GEMM directly, no transpose copy
    Q = (flat.T @ W).reshape(L + 1, L, params.d_r)
    D1 = np.einsum("abj,bj->aj", Q, G2, optimize=True)
    D2 = np.einsum("abj,aj->bj", Q, G1, optimize=True)
    g["u_t1"] += T_ext.T @ D1
    g["u_t2"] += T_cur.T @ D2
    g["label_embeddings"] += D1 @ params.u_t1.T
    g["label_embeddings"][:L] += D2 @ params.u_t2.T
    if f is Family.D_TRILINEAR:
        g["u_h"] += h_all.T @ base
        return
    # shifted word matrices: zero rows where the neighbor is out of range
    h_prev = np.zeros_like(h_all)
    for s, e in spans:
        h_prev[s + 1: e] = h_all[s: e - 1]
    if f is Family.D_QUADRILINEAR:
        G3, G4 = factors
        g["u_h1"] += h_prev.T @ (base * G4)
        g["u_h2"] += h_all.T @ (base * G3)
        return
    G3, G4, G5 = factors
    h_next = np.zeros_like(h_all)
    for s, e in spans:
        h_next[s: e - 1] = h_all[s + 1: e]
    g["u_h1"] += h_prev.T @ (base * G4 * G5)
    g["u_h2"] += h_all.T @ (base * G3 * G5)
    g["u_h3"] += h_next.T @ (base * G3 * G4)


def backprop_lattices(params: ModelParams, reps_list, lat_grads) -> ParamGrad:
    """Sum of lattice-gradient pullbacks over a batch of sequences.

    For every populated parameter field this returns
    sum_i sum_{m,a,b} lat_grads[i][m,a,b] * d(scores_i[m,a,b]) / d(theta),
    evaluated in closed form.  The reduction over sequences is
    deterministic (stacked, position order) so results are reproducible.
    """
    params.validate()
    if len(reps_list) != len(lat_grads):
        raise ValueError("got %d sequences but %d gradients" % (len(reps_list), len(lat_grads)))
    pre = _precompute(params)
    out = ParamGrad.zeros(params)
    L = params.num_labels
    for reps, lg in zip(reps_list, lat_grads):
        _check_reps(params, reps)
        if lg.shape != (reps.length, L, L):
            raise ValueError(
                "lattice gradient shape %r does not match (%d, %d, %d)"
                % (lg.shape, reps.length, L, L)
            )
    if not reps_list:
        return out
    if params.family in (Family.D_TRILINEAR, Family.D_QUADRILINEAR,
                         Family.D_PENTALINEAR):
        _accumulate_decomposed(params, pre, reps_list, lat_grads, out)
        return out
    for reps, lg in zip(reps_list, lat_grads):
        _accumulate_family(params, pre, reps, lg, out)
    return out


def backprop_lattice(params, reps, lat_grad) -> ParamGrad:
    """Single-sequence form of `backprop_lattices`."""
    return backprop_lattices(params, [reps], [lat_grad])
