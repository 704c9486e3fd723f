"""Finite-difference gradient checks and independent reference oracles.

The oracles here deliberately avoid the code paths they check: plain Python
loops, exact rational arithmetic, or closed forms.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor

# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

# Denominator floor, scaled by the magnitude of the contracted output: central
# differences carry round-off of order eps * |F| / h, so a coordinate whose true
# gradient is zero (a bias feeding a train-mode batchnorm) cannot do better.
REL_FLOOR = 1e-6


def gradcheck(fn, inputs: list, h: float = 1e-5, max_coords: int | None = 24, seed: int = 0) -> float:
    """Max pointwise relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` may return any shape; it is contracted with a fixed random
    tensor to get a scalar. Relative error is |a - n| / max(|a|, |n|, floor)
    with floor = REL_FLOOR * max(1, sum |F_i * proj_i|).
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar():
        with T.no_grad():
            return float(np.sum(fn(*inputs).data * proj))

    floor = REL_FLOOR * max(1.0, float(np.sum(np.abs(out.data * proj))))
    loss = T.reduce_sum(out * Tensor(proj))
    T.backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


def _t(rng: Rng, shape, scale=1.0):
    return Tensor(rng.normal(shape, scale=scale), requires_grad=True)


def _away_from_zero(rng: Rng, shape, margin=0.05):
    x = rng.normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)
    return Tensor(x, requires_grad=True)


def _small_model_parts(rng: Rng, dim=4):
    from .mscad import MSCAD, MSCADConfig

    return MSCAD((5, 6, 7), MSCADConfig(common_dim=dim), rng).astype(np.float64)


def _lovasz_logits(rng: Rng, shape=(1, 3, 4, 4), gap=1e-4):
    """Random logits whose per-class Lovasz errors are pairwise at least ``gap`` apart."""
    n, c, h, w = shape
    while True:
        logits = rng.normal(shape)
        target = rng.integers(0, c, size=(n, h, w))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = z / z.sum(axis=1, keepdims=True)
        ok = True
        for k in range(c):
            err = np.sort(np.abs((target == k).astype(float) - p[:, k]).ravel())
            if np.any(np.diff(err) < gap):
                ok = False
                break
        if ok:
            return Tensor(logits, requires_grad=True), target


def gradcheck_cases() -> dict:
    """name -> builder(rng) returning (fn, inputs) in float64."""
    from .backbone import BottleneckAdapter, LoRAConv1x1, PromptTokens
    from .decoder import DecoderConfig, DecoderHead, attention_gate
    from .losses import dice_loss, focal_loss, lovasz_softmax
    from .mscad import diff_direct
    from .nn import Conv2d

    def conv(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        return (lambda x, w, b: T.conv2d(x, w, b, stride, pad)), [_t(rng, (2, 3, 6, 6)), _t(rng, (4, 3, 3, 3)), _t(rng, (4,))]

    def dwconv(rng):
        stride = int(rng.integers(1, 3))
        return (lambda x, w, b: T.depthwise_conv2d(x, w, b, stride, 1)), [_t(rng, (2, 4, 6, 6)), _t(rng, (4, 1, 3, 3)), _t(rng, (4,))]

    def bn(rng):
        st = T.BNState(3, dtype=np.float64)
        return (lambda x, g, b: T.batchnorm2d(x, g, b, st, True)), [_t(rng, (2, 3, 4, 4)), _t(rng, (3,)), _t(rng, (3,))]

    def bn_eval(rng):
        st = T.BNState(3, dtype=np.float64)
        st.running_mean = rng.normal((3,))
        st.running_var = 0.5 + rng.random((3,))
        return (lambda x, g, b: T.batchnorm2d(x, g, b, st, False)), [_t(rng, (2, 3, 4, 4)), _t(rng, (3,)), _t(rng, (3,))]

    def unary(op):
        return lambda rng: (op, [_t(rng, (2, 3, 4, 4))])

    def softmax(rng):
        axis = int(rng.integers(0, 4))
        return (lambda x: T.softmax(x, axis)), [_t(rng, (2, 3, 4, 4))]

    def log_softmax(rng):
        return (lambda x: T.log_softmax(x, 1)), [_t(rng, (2, 3, 4, 4))]

    def binary(op):
        return lambda rng: (op, [_t(rng, (2, 3, 4, 4)), _t(rng, (2, 3, 4, 4))])

    def broadcast_mul(rng):
        return (lambda a, b: a * b), [_t(rng, (2, 3, 4, 4)), _t(rng, (1, 3, 1, 1))]

    def div(rng):
        return (lambda a, b: a / b), [_t(rng, (2, 3, 4)), Tensor(1.5 + rng.random((2, 3, 4)), requires_grad=True)]

    def absval(rng):
        return T.abs, [_away_from_zero(rng, (2, 3, 4, 4))]

    def logop(rng):
        return T.log, [Tensor(0.5 + rng.random((2, 3, 4)), requires_grad=True)]

    def power(rng):
        return (lambda a: T.power(a, 3.0)), [Tensor(0.2 + rng.random((2, 3, 4)), requires_grad=True)]

    def concat(rng):
        return (lambda a, b: T.concat([a, b], axis=1)), [_t(rng, (2, 2, 3, 3)), _t(rng, (2, 3, 3, 3))]

    def upsample(rng):
        factor = (2, 4)[int(rng.integers(0, 2))]
        return (lambda x: T.upsample_bilinear(x, factor)), [_t(rng, (2, 3, 4, 4))]

    def linear(rng):
        return T.linear, [_t(rng, (5, 4)), _t(rng, (3, 4)), _t(rng, (3,))]

    def dropout(rng):
        seed = int(rng.integers(0, 2 ** 31))
        return (lambda x: T.dropout(x, 0.3, True, Rng(seed))), [_t(rng, (2, 3, 4, 4))]

    def reductions(rng):
        return (lambda x: T.concat([T.reduce_mean(x, axis=(0, 2), keepdims=True),
                                    T.reduce_sum(x, axis=(0, 2), keepdims=True)], axis=1)), [_t(rng, (2, 3, 4, 4))]

    def shape_ops(rng):
        return (lambda x: T.transpose(T.reshape(x, (6, 16)), (1, 0))[2:9]), [_t(rng, (2, 3, 4, 4))]

    def adapter(rng):
        ad = BottleneckAdapter(8, 4, rng).astype(np.float64)
        ad.gate.data = rng.normal((1,))
        return (lambda x, s, d, u: _adapter_call(ad, x, s, d, u)), [_t(rng, (2, 8, 3, 3)), ad.gate, ad.down, ad.up]

    def lora(rng):
        host = Conv2d(6, 8, 1, rng, "frozen").astype(np.float64)
        lo = LoRAConv1x1(host, 2, 4.0, 0.0, rng).astype(np.float64)
        lo.B.data = rng.normal(lo.B.shape)
        lo.eval()
        return (lambda x, a, b: _lora_call(lo, x, a, b)), [_t(rng, (2, 6, 3, 3)), lo.A, lo.B]

    def prompts(rng):
        pt = PromptTokens(3, (4, 5, 6), rng).astype(np.float64)
        pt.tokens.data = rng.normal(pt.tokens.shape)
        feats = [Tensor(rng.normal((2, c, 4, 4))) for c in (4, 5, 6)]
        return (lambda tok, p1: T.concat([T.reshape(f, (2, -1)) for f in pt.inject(feats)], axis=1)), [pt.tokens, pt.proj[1]]

    def align_and_fuse(rng):
        m = _small_model_parts(rng)
        args = [_t(rng, (2, 5, 4, 4)), _t(rng, (2, 6, 2, 2)), _t(rng, (2, 7, 1, 1))]
        return (lambda a, b, c, w: m.fusion(a, b, c, (8, 8))), args + [m.fusion.att.weight]

    def diff_adaptive(rng):
        m = _small_model_parts(rng)
        return (lambda a, b, w: m.diff_ada(a, b)), [_t(rng, (2, 4, 4, 4)), _t(rng, (2, 4, 4, 4)), m.diff_ada.conv3.weight]

    def diff_abs(rng):
        return diff_direct, [_t(rng, (2, 4, 4, 4)), _t(rng, (2, 4, 4, 4))]

    def aggregate(rng):
        m = _small_model_parts(rng)
        return (lambda a, b, w: m.aggregate(a, b)), [_t(rng, (2, 4, 4, 4)), _t(rng, (2, 4, 4, 4)), m.aggregate.conv.weight]

    def mscad_full(rng):
        m = _small_model_parts(rng)
        feats = []
        for _ in range(2):
            feats.append({"C2": Tensor(np.zeros((2, 1, 8, 8))), "C3": _t(rng, (2, 5, 4, 4)),
                          "C4": _t(rng, (2, 6, 2, 2)), "C5": _t(rng, (2, 7, 1, 1))})
        inputs = [feats[0]["C3"], feats[0]["C4"], feats[1]["C5"]]
        inputs += [p for _, p in m.named_parameters()]
        return (lambda *args: m(feats[0], feats[1])), inputs

    def context_enhance(rng):
        head = DecoderHead(4, DecoderConfig(num_classes=3), rng).astype(np.float64)
        return (lambda x, w: head.context_enhance(x)), [_t(rng, (2, 4, 4, 4)), head.units[1].conv.weight]

    def gate(rng):
        return attention_gate, [_t(rng, (2, 3, 4, 4))]

    def classify(rng):
        head = DecoderHead(4, DecoderConfig(num_classes=3), rng).astype(np.float64)
        return (lambda x, w: head.classify_and_upsample(x)), [_t(rng, (1, 4, 3, 3)), head.classifier.weight]

    def focal(rng):
        x = _t(rng, (1, 3, 4, 4))
        target = rng.integers(0, 3, size=(1, 4, 4))
        alpha = 0.5 + rng.random(3)
        return (lambda z: focal_loss(z, target, 3.0, alpha)), [x]

    def dice(rng):
        x = _t(rng, (1, 3, 4, 4))
        target = rng.integers(0, 3, size=(1, 4, 4))
        return (lambda z: dice_loss(z, target, 1e-5)), [x]

    def lovasz(rng):
        x, target = _lovasz_logits(rng)
        return (lambda z: lovasz_softmax(z, target)), [x]

    return {
        "conv2d": conv, "depthwise_conv2d": dwconv, "batchnorm2d_train": bn, "batchnorm2d_eval": bn_eval,
        "gelu": unary(T.gelu), "sigmoid": unary(T.sigmoid), "softmax": softmax, "log_softmax": log_softmax,
        "exp": unary(T.exp), "log": logop, "power": power,
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul), "mul_broadcast": broadcast_mul,
        "div": div, "abs": absval, "concat": concat, "upsample_bilinear": upsample, "linear": linear,
        "dropout": dropout, "reduce": reductions, "reshape_transpose_slice": shape_ops,
        "adapter": adapter, "lora": lora, "prompts": prompts,
        "align_and_fuse": align_and_fuse, "diff_adaptive": diff_adaptive, "diff_direct": diff_abs,
        "aggregate": aggregate, "mscad_end_to_end": mscad_full,
        "context_enhance": context_enhance, "attention_gate": gate, "classify_and_upsample": classify,
        "focal_loss": focal, "dice_loss": dice, "lovasz_softmax": lovasz,
    }


def _adapter_call(ad, x, *_params):
    return ad(x)


def _lora_call(lo, x, *_params):
    return lo(x)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def naive_conv2d(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                y, xx = oy * stride + i - pad, ox * stride + j - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[bi, ci, y, xx]) * float(w[co, ci, i, j])
                    out[bi, co, oy, ox] = acc
    return out


def _jaccard_set_loss(mistakes: frozenset, positives: frozenset) -> Fraction:
    union = positives | mistakes
    if not union:
        return Fraction(0)
    return Fraction(len(mistakes), len(union))


def lovasz_bruteforce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Lovasz-Softmax from the set-function definition, in exact rationals.

    ``probs`` is (C, P), ``labels`` is (P,). For each class present in
    ``labels`` the pixels are visited by decreasing error (ties by index) and
    each error is weighted by the increase of |M| / |Y u M| as the pixel joins
    the mistake set M.
    """
    c, p = probs.shape
    values = []
    for k in range(c):
        positives = frozenset(i for i in range(p) if labels[i] == k)
        if not positives:
            continue
        errs = [abs(Fraction(1 if labels[i] == k else 0) - Fraction(float(probs[k, i]))) for i in range(p)]
        order = sorted(range(p), key=lambda i: (-errs[i], i))
        total = Fraction(0)
        prev = Fraction(0)
        members = set()
        for i in order:
            members.add(i)
            cur = _jaccard_set_loss(frozenset(members), positives)
            total += errs[i] * (cur - prev)
            prev = cur
        values.append(total)
    return float(sum(values, Fraction(0)) / len(values)) if values else 0.0


def lovasz_permutation_max(errors: list, positives: set) -> Fraction:
    """Lovasz extension as the maximum over all visiting orders (valid for submodular losses)."""
    p = len(errors)
    best = None
    for perm in itertools.permutations(range(p)):
        members, prev, total = set(), Fraction(0), Fraction(0)
        for i in perm:
            members.add(i)
            cur = _jaccard_set_loss(frozenset(members), frozenset(positives))
            total += Fraction(errors[i]) * (cur - prev)
            prev = cur
        best = total if best is None or total > best else best
    return best


def cross_entropy_oracle(logits: np.ndarray, target: np.ndarray) -> float:
    n, c, h, w = logits.shape
    total = 0.0
    for b in range(n):
        for y in range(h):
            for x in range(w):
                z = [float(logits[b, k, y, x]) for k in range(c)]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[int(target[b, y, x])]
    return total / (n * h * w)


def dice_oracle(logits: np.ndarray, target: np.ndarray, eps: float) -> float:
    n, c, h, w = logits.shape
    probs = np.zeros_like(logits, dtype=np.float64)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                z = [math.exp(float(logits[b, k, y, x])) for k in range(c)]
                s = sum(z)
                for k in range(c):
                    probs[b, k, y, x] = z[k] / s
    terms = []
    for k in range(c):
        inter = sq_y = sq_p = 0.0
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    yv = 1.0 if target[b, y, x] == k else 0.0
                    pv = probs[b, k, y, x]
                    inter += yv * pv
                    sq_y += yv * yv
                    sq_p += pv * pv
        terms.append(1.0 - (2.0 * inter + eps) / (sq_y + sq_p + eps))
    return sum(terms) / c


def confusion_oracle(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    out = [[0] * k for _ in range(k)]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        out[p][g] += 1
    return np.array(out, dtype=np.int64)


def metrics_oracle(counts: np.ndarray, include_background: bool) -> dict:
    k = counts.shape[0]
    total = sum(int(counts[i, j]) for i in range(k) for j in range(k))
    out = {"OA": sum(int(counts[i, i]) for i in range(k)) / total, "P": [], "R": [], "F1": [], "IoU": []}
    used = []
    for c in range(k):
        tp = int(counts[c, c])
        fp = sum(int(counts[c, j]) for j in range(k)) - tp
        fn = sum(int(counts[i, c]) for i in range(k)) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
        for key, v in zip(("P", "R", "F1", "IoU"), (p, r, f1, iou)):
            out[key].append(v)
        if tp + fp + fn and (include_background or c > 0):
            used.append(c)
    out["mIoU"] = sum(out["IoU"][c] for c in used) / len(used) if used else 0.0
    out["mF1"] = sum(out["F1"][c] for c in used) / len(used) if used else 0.0
    return out


def scd_rule_oracle(l1: np.ndarray, l2: np.ndarray) -> np.ndarray:
    out = np.zeros(l1.shape, dtype=np.uint8)
    for idx in np.ndindex(l1.shape):
        a, b = int(l1[idx]), int(l2[idx])
        out[idx] = b if (a != b and b > 0) else 0
    return out


def lr_closed_form(epoch: float, base: float, eta_min: float, t0: float, t_mult: float) -> float:
    if t_mult == 1:
        i = math.floor(epoch / t0)
        start, length = i * t0, t0
    else:
        i = math.floor(math.log(epoch / t0 * (t_mult - 1) + 1, t_mult))
        start = t0 * (t_mult ** i - 1) / (t_mult - 1)
        length = t0 * t_mult ** i
    return eta_min + 0.5 * (base - eta_min) * (1 + math.cos(math.pi * (epoch - start) / length))


# ---------------------------------------------------------------------------
# suites for the command line
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def run_gradcheck_suite(instances: int = 20, tol: float = 1e-4, seed: int = 0) -> list:
    results = []
    for i, (name, build) in enumerate(gradcheck_cases().items()):
        t0 = time.perf_counter()
        rng = Rng(seed).child(i)
        worst = 0.0
        for j in range(instances):
            fn, inputs = build(rng.child(j))
            worst = max(worst, gradcheck(fn, inputs, seed=j))
        results.append(CheckResult(f"gradcheck/{name}", worst <= tol, f"max rel err {worst:.2e} over {instances}",
                                   time.perf_counter() - t0))
    return results


def run_oracle_suite(seed: int = 0) -> list:
    from . import _kernels
    from .config import TrainConfig
    from .data import scd_to_mcd
    from .losses import composite_loss, dice_loss, focal_loss, LossConfig, lovasz_softmax
    from .metrics import ConfusionMatrix, compute_metrics
    from .train import lr_at

    rng = Rng(seed)
    results = []

    def record(name, fn):
        t0 = time.perf_counter()
        ok, detail = fn()
        results.append(CheckResult(f"oracle/{name}", bool(ok), detail, time.perf_counter() - t0))

    def conv_naive():
        worst = 0.0
        r = rng.child(1)
        for _ in range(10):
            stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
            x, w, b = r.normal((2, 3, 6, 5)), r.normal((4, 3, 3, 2)), r.normal((4,))
            got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
            worst = max(worst, float(np.max(np.abs(got - naive_conv2d(x, w, b, stride, pad)))))
        return worst <= 1e-10, f"max abs diff {worst:.1e}"

    def lovasz():
        worst = 0.0
        r = rng.child(2)
        for _ in range(200):
            c = int(r.integers(2, 4))
            p = int(r.integers(1, 7))
            logits = r.normal((1, c, 1, p))
            target = r.integers(0, c, size=(1, 1, p))
            got = float(lovasz_softmax(Tensor(logits), target).data)
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs = (z / z.sum(axis=1, keepdims=True))[0, :, 0, :]
            worst = max(worst, abs(got - lovasz_bruteforce(probs, target[0, 0])))
        return worst <= 1e-9, f"max abs diff {worst:.1e} over 200"

    def focal_ce():
        worst = 0.0
        r = rng.child(3)
        for _ in range(20):
            logits, target = r.normal((2, 4, 3, 3)), r.integers(0, 4, size=(2, 3, 3))
            got = float(focal_loss(Tensor(logits), target, gamma=0.0, alpha=np.ones(4)).data)
            worst = max(worst, abs(got - cross_entropy_oracle(logits, target)))
        return worst <= 1e-12, f"max abs diff {worst:.1e}"

    def dice():
        worst = 0.0
        r = rng.child(4)
        for _ in range(20):
            logits, target = r.normal((2, 3, 3, 3)), r.integers(0, 3, size=(2, 3, 3))
            got = float(dice_loss(Tensor(logits), target, 1e-5).data)
            worst = max(worst, abs(got - dice_oracle(logits, target, 1e-5)))
        return worst <= 1e-12, f"max abs diff {worst:.1e}"

    def composite():
        worst = 0.0
        r = rng.child(5)
        cfg = LossConfig()
        for _ in range(20):
            logits, target = r.normal((1, 3, 4, 4)), r.integers(0, 3, size=(1, 4, 4))
            x = Tensor(logits)
            got = float(composite_loss(x, target, cfg).data)
            want = (0.4 * float(focal_loss(x, target, 3.0).data) + 0.3 * float(dice_loss(x, target, 1e-5).data)
                    + 0.3 * float(lovasz_softmax(x, target).data))
            worst = max(worst, abs(got - want))
        return worst <= 1e-12, f"max abs diff {worst:.1e}"

    def metrics():
        r = rng.child(6)
        worst = 0.0
        exact = True
        for _ in range(100):
            pred, gt = r.integers(0, 7, size=(16, 16)), r.integers(0, 7, size=(16, 16))
            cm = ConfusionMatrix(7).update(pred, gt)
            ref = confusion_oracle(pred, gt, 7)
            exact &= bool(np.array_equal(cm.counts, ref))
            for bg in (False, True):
                m, o = compute_metrics(cm, bg), metrics_oracle(ref, bg)
                diffs = [abs(m["OA"] - o["OA"]), abs(m["mIoU"] - o["mIoU"]), abs(m["mF1"] - o["mF1"])]
                diffs += list(np.abs(m["precision"] - o["P"])) + list(np.abs(m["recall"] - o["R"]))
                diffs += list(np.abs(m["f1"] - o["F1"])) + list(np.abs(m["iou"] - o["IoU"]))
                worst = max(worst, max(diffs))
        return exact and worst <= 1e-12, f"counts exact={exact}, max ratio diff {worst:.1e}"

    def binary_f1():
        r = rng.child(7)
        worst = 0.0
        for _ in range(50):
            pred, gt = r.integers(0, 2, size=(16, 16)), r.integers(0, 2, size=(16, 16))
            f1 = compute_metrics(ConfusionMatrix(2).update(pred, gt))["f1"][1]
            inter = float(np.sum((pred == 1) & (gt == 1)))
            dice = 2 * inter / (np.sum(pred == 1) + np.sum(gt == 1))
            worst = max(worst, abs(f1 - dice))
        return worst <= 1e-12, f"max abs diff {worst:.1e}"

    def scd():
        r = rng.child(8)
        ok = True
        for _ in range(50):
            a, b = r.integers(0, 6, size=(12, 12)), r.integers(0, 6, size=(12, 12))
            ok &= bool(np.array_equal(scd_to_mcd(a, b), scd_rule_oracle(a, b)))
        return ok, "50 random pairs"

    def schedule():
        r = rng.child(9)
        cfg = TrainConfig()
        worst = 0.0
        for e in r.uniform(0, 400, size=1000):
            worst = max(worst, abs(lr_at(float(e), cfg) - lr_closed_form(float(e), cfg.base_lr, cfg.eta_min, cfg.t0, cfg.t_mult)))
        restarts = lr_at(30.0, cfg) == cfg.base_lr and lr_at(90.0, cfg) == cfg.base_lr and lr_at(0.0, cfg) == cfg.base_lr
        return worst <= 1e-12 and restarts, f"max abs diff {worst:.1e}; restarts at 30/90 exact={restarts}"

    def kernels_agree():
        if not _kernels.HAS_NUMBA:
            return True, "numba unavailable; numpy path only"
        r = rng.child(10)
        xp = r.normal((2, 3, 7, 7))
        a = _kernels.get("im2col", "numba")(xp, 3, 3, 2, 3, 3)
        b = _kernels.get("im2col", "numpy")(xp, 3, 3, 2, 3, 3)
        w = r.normal((3, 1, 3, 3))
        c = _kernels.get("dwconv_fwd", "numba")(xp, w, 1, 5, 5)
        d = _kernels.get("dwconv_fwd", "numpy")(xp, w, 1, 5, 5)
        diff = max(float(np.max(np.abs(a - b))), float(np.max(np.abs(c - d))))
        return diff <= 1e-12, f"numba vs numpy max diff {diff:.1e}"

    record("conv2d_vs_naive", conv_naive)
    record("lovasz_vs_bruteforce", lovasz)
    record("focal_gamma0_vs_cross_entropy", focal_ce)
    record("dice_vs_direct_formula", dice)
    record("composite_weighted_sum", composite)
    record("metrics_vs_counting", metrics)
    record("binary_f1_equals_dice", binary_f1)
    record("scd_to_mcd_vs_rule", scd)
    record("lr_schedule_closed_form", schedule)
    record("kernel_backends_agree", kernels_agree)
    return results


def format_results(results: list) -> str:
    width = max((len(r.name) for r in results), default=10)
    lines = [f"{'check':<{width}}  result  {'time':>7}  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:6.2f}s  {r.detail}")
    return "\n".join(lines)
