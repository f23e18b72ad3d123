"""Explicit looped-block construction for a shared-plus-specific deep stack, with an equivalence checker.

The deep stack computes X^(r) = U_r(S(X^(r-1))) for r = 1..R. Every sub-block is
(id + FFN) o (id + MHSA) with ReLU FFNs and bias-free attention. The looped block
runs S, then a bank holding all U_j side by side. A complementary selector
s_r = 1_R - e_r switches off every branch except r: FFN units get a -C*s_r(j)
shift, attention heads get a large query/key bonus that sends their mass to
an extra dummy token whose data coordinates are zero. A small counter network
advances the selector after each pass.

Augmented token layout: [data (d) | selector (R) | counter (1) | token flag | dummy flag].
The two flags sum to 1 on every token and stand in for a constant input.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MARKERS = 2
COUNTER = 1


class CalibrationError(RuntimeError):
    """The gating constant is too small: an inactive branch leaked output."""


class EquivalenceError(AssertionError):
    def __init__(self, report: "EquivalenceReport"):
        super().__init__(
            f"looped block diverges from the deep stack: max deviation {report.max_deviation:.3e} "
            f"first at step {report.first_divergence}"
        )
        self.report = report


# ----------------------------------------------------------------- sub-blocks
@dataclass
class Head:
    wq: np.ndarray  # (D, dk)
    wk: np.ndarray  # (D, dk)
    wv: np.ndarray  # (D, dv)
    wo: np.ndarray  # (dv, D)


@dataclass
class SubBlock:
    heads: list[Head]
    w1: np.ndarray  # (D, F)
    b1: np.ndarray  # (F,)
    w2: np.ndarray  # (F, D)
    b2: np.ndarray  # (D,)
    scale: float = 1.0

    @property
    def ffn_width(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for h in self.heads:
            out += [h.wq, h.wk, h.wv, h.wo]
        return out + [self.w1, self.b1, self.w2, self.b2]

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def nonzero_params(self) -> int:
        return sum(int(np.count_nonzero(t)) for t in self.tensors())


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sub_block_forward(x: np.ndarray, sb: SubBlock, record: dict | None = None) -> np.ndarray:
    """x + MHSA(x), then + ReLU FFN; x is (tokens, D)."""
    att_out = np.zeros_like(x)
    probs = []
    for h in sb.heads:
        q = (x @ h.wq) * sb.scale
        k = x @ h.wk
        p = _softmax(q @ k.T)
        probs.append(p)
        att_out += (p @ (x @ h.wv)) @ h.wo
    z = x + att_out
    pre = z @ sb.w1 + sb.b1
    hidden = np.maximum(pre, 0.0)
    if record is not None:
        record["attention"] = probs
        record["mid"] = z
        record["pre"] = pre
        record["hidden"] = hidden
    return z + hidden @ sb.w2 + sb.b2


def random_sub_block(rng: np.random.Generator, d: int, ffn: int, heads: int, dh: int, scale: float = 0.5) -> SubBlock:
    s = scale / math.sqrt(d)
    hs = [
        Head(
            rng.standard_normal((d, dh)) * s,
            rng.standard_normal((d, dh)) * s,
            rng.standard_normal((d, dh)) * s,
            rng.standard_normal((dh, d)) * scale / math.sqrt(dh),
        )
        for _ in range(heads)
    ]
    return SubBlock(
        hs,
        rng.standard_normal((d, ffn)) * s,
        rng.standard_normal(ffn) * 0.1,
        rng.standard_normal((ffn, d)) * scale / math.sqrt(max(ffn, 1)),
        rng.standard_normal(d) * 0.1,
        scale=1.0 / math.sqrt(dh),
    )


@dataclass
class SharedSpecificStack:
    shared: SubBlock
    specific: list[SubBlock]
    d: int

    @property
    def depth(self) -> int:
        return len(self.specific)

    def __post_init__(self):
        if not self.specific:
            raise ValueError("need at least one specific sub-block")
        for sb in [self.shared] + self.specific:
            if sb.w1.shape[0] != self.d or sb.b2.shape != (self.d,):
                raise ValueError("all sub-blocks must act on dimension d")

    def forward(self, x: np.ndarray, trace: bool = False):
        """Deep stack; with ``trace`` returns every X^(r), r = 0..R."""
        states = [x]
        for u in self.specific:
            x = sub_block_forward(sub_block_forward(x, self.shared), u)
            states.append(x)
        return states if trace else x


def random_stack(
    rng: np.random.Generator,
    d: int,
    depth: int,
    ffn_shared: int = 16,
    ffn_specific: int = 8,
    heads_shared: int = 2,
    heads_specific: int = 1,
    head_dim: int = 4,
) -> SharedSpecificStack:
    shared = random_sub_block(rng, d, ffn_shared, heads_shared, head_dim)
    specific = [random_sub_block(rng, d, ffn_specific, heads_specific, head_dim) for _ in range(depth)]
    return SharedSpecificStack(shared, specific, d)


# --------------------------------------------------------------- construction
def make_selector(r: int, R: int) -> np.ndarray:
    """Complementary one-hot 1_R - e_r (1-based r)."""
    if not 1 <= r <= R:
        raise ValueError(f"step {r} outside 1..{R}")
    s = np.ones(R)
    s[r - 1] = 0.0
    return s


@dataclass
class Layout:
    d: int
    R: int

    @property
    def sel(self) -> slice:
        return slice(self.d, self.d + self.R)

    @property
    def counter(self) -> int:
        return self.d + self.R

    @property
    def tok(self) -> int:
        return self.d + self.R + 1

    @property
    def dummy(self) -> int:
        return self.d + self.R + 2

    @property
    def width(self) -> int:
        return self.d + self.R + COUNTER + MARKERS


@dataclass
class LoopedBlockSpec:
    shared: SubBlock
    bank: SubBlock
    layout: Layout
    C: float
    L: float
    bank_heads: list[tuple[int, int]]  # (first head, count) per branch
    bank_units: list[tuple[int, int]]  # (first hidden unit, count) per branch, bias unit excluded
    bias_units: list[int]
    counter_units: list[int]
    increment_unit: int

    @property
    def widths(self) -> dict[str, int]:
        return {
            "d": self.layout.width,
            "d_ff": self.shared.ffn_width + self.bank.ffn_width,
            "heads": len(self.shared.heads) + len(self.bank.heads),
        }

    def tensors(self) -> list[np.ndarray]:
        return self.shared.tensors() + self.bank.tensors()

    def step(self, z: np.ndarray, record: dict | None = None) -> np.ndarray:
        rec_s = {} if record is not None else None
        rec_b = {} if record is not None else None
        z = sub_block_forward(z, self.shared, rec_s)
        z = sub_block_forward(z, self.bank, rec_b)
        if record is not None:
            record["shared"] = rec_s
            record["bank"] = rec_b
        return z


def calibrate(stack: SharedSpecificStack, inputs: list[np.ndarray]) -> tuple[float, float]:
    """Max |FFN preactivation| of every branch at every step, and max |attention score|.

    Branch preactivations are taken on the state the looped bank FFN sees: the
    shared output plus the active branch's attention. Returns (C, score_bound)
    with C doubled as the safety margin.
    """
    pre_max = 0.0
    score_max = 0.0
    for x in inputs:
        states = stack.forward(x, trace=True)
        for r, state in enumerate(states[:-1]):
            rec = {}
            h = sub_block_forward(state, stack.shared, rec)
            pre_max = max(pre_max, float(np.abs(rec["pre"]).max(initial=0.0)))
            score_max = max(score_max, _max_score(state, stack.shared))
            rec = {}
            sub_block_forward(h, stack.specific[r], rec)
            mid = rec["mid"]
            for u in stack.specific:
                pre = mid @ u.w1 + u.b1
                pre_max = max(pre_max, float(np.abs(pre).max(initial=0.0)))
                score_max = max(score_max, _max_score(h, u))
    return 2.0 * max(pre_max, 1e-3), score_max


def _max_score(x: np.ndarray, sb: SubBlock) -> float:
    best = 0.0
    for h in sb.heads:
        s = ((x @ h.wq) * sb.scale) @ (x @ h.wk).T
        best = max(best, float(np.abs(s).max(initial=0.0)))
    return best


def _lift_head(h: Head, scale: float, lay: Layout, q_extra: np.ndarray) -> Head:
    """Data-space head embedded in the augmented width plus one routing dimension."""
    D, d = lay.width, lay.d
    dk = h.wq.shape[1]
    wq = np.zeros((D, dk + 1))
    wk = np.zeros((D, dk + 1))
    wq[:d, :dk] = h.wq * scale
    wk[:d, :dk] = h.wk
    wq[:, dk] = q_extra
    wk[lay.dummy, dk] = 1.0
    wv = np.zeros((D, h.wv.shape[1]))
    wv[:d] = h.wv
    wo = np.zeros((h.wo.shape[0], D))
    wo[:, :d] = h.wo
    return Head(wq, wk, wv, wo)


def build_looped_block(
    stack: SharedSpecificStack,
    calibration_inputs: list[np.ndarray] | None = None,
    C: float | None = None,
    L: float | None = None,
) -> LoopedBlockSpec:
    d, R = stack.d, stack.depth
    lay = Layout(d, R)
    D = lay.width
    if C is None or L is None:
        if calibration_inputs is None:
            raise ValueError("need calibration inputs when C or L is not given")
        c_cal, score = calibrate(stack, calibration_inputs)
        C = c_cal if C is None else C
        # the dummy bonus must dwarf real scores so exp() underflows to exactly zero
        L = max(20.0 * C, 2.0 * score + 1000.0) if L is None else L

    # shared sub-block: every real token attends normally, the dummy attends to itself
    q_shared = np.zeros(D)
    q_shared[lay.tok] = -L
    q_shared[lay.dummy] = L
    s = stack.shared
    shared_heads = [_lift_head(h, s.scale, lay, q_shared) for h in s.heads]
    f = s.ffn_width
    w1 = np.zeros((D, f + 1))
    w1[:d, :f] = s.w1
    w1[lay.tok, :f] = s.b1
    w1[lay.tok, f] = 1.0  # output-bias unit, silent on the dummy
    w2 = np.zeros((f + 1, D))
    w2[:f, :d] = s.w2
    w2[f, :d] = s.b2
    shared = SubBlock(shared_heads, w1, np.zeros(f + 1), w2, np.zeros(D), scale=1.0)

    # bank: branch j is live only while s(j) = 0
    bank_heads, head_spans = [], []
    cols1, rows2 = [], []
    unit_spans, bias_units = [], []
    for j, u in enumerate(stack.specific):
        q = np.zeros(D)
        q[lay.tok] = -L
        q[lay.dummy] = L
        q[lay.d + j] = 2.0 * L
        head_spans.append((len(bank_heads), len(u.heads)))
        bank_heads += [_lift_head(h, u.scale, lay, q) for h in u.heads]
        fu = u.ffn_width
        c1 = np.zeros((D, fu))
        c1[:d] = u.w1
        c1[lay.tok] = u.b1
        c1[lay.d + j] = -C
        r2 = np.zeros((fu, D))
        r2[:, :d] = u.w2
        start = sum(c.shape[1] for c in cols1)
        unit_spans.append((start, fu))
        cols1.append(c1)
        rows2.append(r2)
        cb = np.zeros((D, 1))
        cb[lay.tok] = 1.0
        cb[lay.d + j] = -2.0
        cb[lay.dummy] = -2.0
        rb = np.zeros((1, D))
        rb[0, :d] = u.b2
        bias_units.append(start + fu)
        cols1.append(cb)
        rows2.append(rb)
    counter_units = []
    for j in range(R):
        cc = np.zeros((D, 1))
        cc[lay.tok] = cc[lay.dummy] = 1.0
        cc[lay.d + j] = -1.0
        rc = np.zeros((1, D))
        rc[0, lay.d + j] = 1.0
        if j + 1 < R:
            rc[0, lay.d + j + 1] = -1.0
        counter_units.append(sum(c.shape[1] for c in cols1))
        cols1.append(cc)
        rows2.append(rc)
    ci = np.zeros((D, 1))
    ci[lay.tok] = ci[lay.dummy] = 1.0
    ri = np.zeros((1, D))
    ri[0, lay.counter] = 1.0
    increment = sum(c.shape[1] for c in cols1)
    cols1.append(ci)
    rows2.append(ri)
    bw1 = np.concatenate(cols1, axis=1)
    bw2 = np.concatenate(rows2, axis=0)
    bank = SubBlock(bank_heads, bw1, np.zeros(bw1.shape[1]), bw2, np.zeros(D), scale=1.0)
    return LoopedBlockSpec(shared, bank, lay, C, L, head_spans, unit_spans, bias_units, counter_units, increment)


def augment(x: np.ndarray, R: int) -> np.ndarray:
    """Real tokens plus one trailing dummy token, selector at step 1, counter 0."""
    n, d = x.shape
    lay = Layout(d, R)
    z = np.zeros((n + 1, lay.width))
    z[:n, :d] = x
    z[:, lay.sel] = make_selector(1, R)
    z[:n, lay.tok] = 1.0
    z[n, lay.dummy] = 1.0
    return z


def expected_selector(r: int, R: int) -> np.ndarray:
    """Selector after r completed passes; all ones once every branch has run."""
    return make_selector(r + 1, R) if r < R else np.ones(R)


# --------------------------------------------------------------- verification
@dataclass
class EquivalenceReport:
    max_deviation: float
    step_deviation: list[float]
    first_divergence: int | None
    dummy_max: float
    min_inactive_mass: float
    selector_ok: bool
    counter_ok: bool
    tol: float

    @property
    def passed(self) -> bool:
        return self.first_divergence is None and self.selector_ok and self.counter_ok and self.dummy_max == 0.0


def verify_equivalence(
    stack: SharedSpecificStack,
    looped: LoopedBlockSpec,
    inputs: list[np.ndarray],
    tol: float = 1e-9,
    raise_on_fail: bool = False,
) -> EquivalenceReport:
    """Compare data coords of real tokens after every pass r = 1..R against the deep stack."""
    R = stack.depth
    lay = looped.layout
    step_dev = [0.0] * R
    dummy_max = 0.0
    min_mass = 1.0
    selector_ok = counter_ok = True
    for x in inputs:
        deep = stack.forward(x, trace=True)
        z = augment(x, R)
        n = x.shape[0]
        for r in range(1, R + 1):
            rec = {}
            z = looped.step(z, rec)
            _check_gating(looped, rec["bank"], r, n)
            for j, (first, count) in enumerate(looped.bank_heads):
                if j == r - 1:
                    continue
                for p in rec["bank"]["attention"][first : first + count]:
                    min_mass = min(min_mass, float(p[:n, n].min()))
            step_dev[r - 1] = max(step_dev[r - 1], float(np.abs(z[:n, : lay.d] - deep[r]).max(initial=0.0)))
            dummy_max = max(dummy_max, float(np.abs(z[n, : lay.d]).max(initial=0.0)))
            if not np.array_equal(z[:, lay.sel], np.broadcast_to(expected_selector(r, R), (n + 1, R))):
                selector_ok = False
            if not np.all(z[:, lay.counter] == r):
                counter_ok = False
    first = next((r + 1 for r, v in enumerate(step_dev) if not v <= tol), None)
    report = EquivalenceReport(max(step_dev), step_dev, first, dummy_max, min_mass, selector_ok, counter_ok, tol)
    if raise_on_fail and not report.passed:
        raise EquivalenceError(report)
    return report


def _check_gating(looped: LoopedBlockSpec, rec: dict, r: int, n: int) -> None:
    hidden = rec["hidden"]
    for j, (start, count) in enumerate(looped.bank_units):
        if j == r - 1:
            continue
        cols = list(range(start, start + count)) + [looped.bias_units[j]]
        leak = float(np.abs(hidden[:, cols]).max(initial=0.0))
        if leak > 0.0:
            raise CalibrationError(f"branch {j + 1} active at step {r} (unit output {leak:.3e}); increase C")


def corrupt_branch(looped: LoopedBlockSpec, branch: int, delta: float = 0.5) -> None:
    """Fault injection: perturb the output bias of bank branch ``branch`` (1-based)."""
    unit = looped.bias_units[branch - 1]
    looped.bank.w2[unit, : looped.layout.d] += delta


def run_looped(looped: LoopedBlockSpec, x: np.ndarray, steps: int) -> np.ndarray:
    z = augment(x, looped.layout.R)
    for _ in range(steps):
        z = looped.step(z)
    return z[: x.shape[0], : looped.layout.d]


# --------------------------------------------------------------- accounting
@dataclass
class SizeReport:
    params_deep: int
    params_looped: int
    nonzero_looped: int

    @property
    def ratio(self) -> float:
        return self.params_looped / self.params_deep

    @property
    def nonzero_ratio(self) -> float:
        return self.nonzero_looped / self.params_deep


def size_accounting(stack: SharedSpecificStack, looped: LoopedBlockSpec | None = None) -> SizeReport:
    """R(|S| + |U|) for the deep stack versus every assembled tensor of the looped block.

    ``nonzero_looped`` counts only structurally used entries, which is the
    |S| + R|U| + overhead comparison; the dense count includes zero padding.
    """
    if looped is None:
        looped = build_looped_block(stack, C=1.0, L=1000.0)
    deep = stack.depth * stack.shared.num_params() + sum(u.num_params() for u in stack.specific)
    dense = sum(t.size for t in looped.tensors())
    nonzero = sum(int(np.count_nonzero(t)) for t in looped.tensors())
    return SizeReport(deep, dense, nonzero)


def looped_param_formula(stack: SharedSpecificStack) -> int:
    """Closed-form dense size of the assembled block (hand tally)."""
    d, R = stack.d, stack.depth
    D = d + R + COUNTER + MARKERS

    def heads(sb):
        return sum(2 * D * (h.wq.shape[1] + 1) + D * h.wv.shape[1] + h.wo.shape[0] * D for h in sb.heads)

    fs = stack.shared.ffn_width + 1
    fb = sum(u.ffn_width + 1 for u in stack.specific) + R + 1
    shared = heads(stack.shared) + D * fs + fs + fs * D + D
    bank = sum(heads(u) for u in stack.specific) + D * fb + fb + fb * D + D
    return shared + bank


# --------------------------------------------------------------- trials
@dataclass
class TrialResult:
    trial: int
    d: int
    R: int
    tokens: int
    max_deviation: float
    first_divergence: int | None
    min_inactive_mass: float
    passed: bool


def run_trials(
    trials: int = 100,
    dmax: int = 16,
    rmax: int = 4,
    tol: float = 1e-9,
    seed: int = 0,
    inputs_per_trial: int = 3,
) -> list[TrialResult]:
    """Seeded random stacks with d <= dmax, R <= rmax; deep stack is the reference."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(trials):
        d = int(rng.integers(2, dmax + 1))
        R = int(rng.integers(1, rmax + 1))
        n = int(rng.integers(1, 6))
        stack = random_stack(
            rng, d, R,
            ffn_shared=int(rng.integers(1, 2 * d + 1)),
            ffn_specific=int(rng.integers(1, d + 1)),
            heads_shared=int(rng.integers(1, 3)),
            heads_specific=int(rng.integers(1, 3)),
            head_dim=int(rng.integers(1, 5)),
        )
        xs = [rng.standard_normal((n, d)) for _ in range(inputs_per_trial)]
        looped = build_looped_block(stack, xs)
        rep = verify_equivalence(stack, looped, xs, tol)
        out.append(TrialResult(i, d, R, n, rep.max_deviation, rep.first_divergence, rep.min_inactive_mass, rep.passed))
    return out


TRIAL_FIELDS = ["trial", "d", "R", "tokens", "max_deviation", "first_divergence", "min_inactive_mass", "passed"]


def write_trials_csv(path: str | Path, results: list[TrialResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_FIELDS)
        for r in results:
            w.writerow([getattr(r, f) if getattr(r, f) is not None else "" for f in TRIAL_FIELDS])
