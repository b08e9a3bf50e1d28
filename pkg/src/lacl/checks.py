"""Self-verification suites behind ``lacl check``.

Each suite compares the vectorized implementation against an independently
written oracle and returns a :class:`CheckResult`; failing cases carry
enough data to be replayed.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .loss import batch_loss
from .mathutils import finite_diff_gradient, relative_error
from .model import PARAM_NAMES, ModelDims, ModelParams, backward, forward
from .qrs import select_updates
from .queue import LesionQueue

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: int = 0
    total: int = 0
    max_error: float = 0.0
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.total and not self.failures

    def summary(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{self.name}: {status} {self.passed}/{self.total} cases, max error {self.max_error:.3e}"


def _unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_params(dims, rng):
    p = ModelParams.init(dims, rng)
    for n in PARAM_NAMES:
        p.tensors[n] = p.tensors[n] + 0.3 * rng.standard_normal(p[n].shape)
    return p


def gradient_check(instances: int = 20, seed: int = 0, h: float = 1e-5) -> CheckResult:
    """Full-pipeline gradients (input -> network -> loss) against central differences,
    for plain InfoNCE and the class-aware loss with both denominator forms."""
    res = CheckResult("grad")
    rng = np.random.default_rng(seed)
    variants = [("info_nce", False, True), ("lesion_info_nce", True, True), ("lesion_info_nce_verbatim", True, False)]
    for i in range(instances):
        dims = ModelDims(*rng.integers(3, 7, size=5).tolist())
        params = _random_params(dims, rng)
        key_params = _random_params(dims, rng)
        B = int(rng.integers(1, 6))
        K = int(rng.integers(2, 5))
        x = rng.standard_normal((B, dims.input_dim))
        labels = rng.integers(0, K, B)
        tau = float(rng.uniform(0.1, 1.0))
        k_plus = forward(key_params, x + 0.1 * rng.standard_normal(x.shape)).projection
        for name, class_aware, include_pos in variants:
            queue = LesionQueue.create(K if class_aware else 1, 4 * K, dims.contrast_dim, seed=int(rng.integers(1 << 30)))
            trace = forward(params, x, keep_trace=True)
            _, g = batch_loss(trace.projection, k_plus, labels, queue, tau, include_pos, class_aware)
            grads = backward(trace, g)
            worst = 0.0
            for pname in PARAM_NAMES:
                def f(w, pname=pname):
                    p = params.copy()
                    p.tensors[pname] = w
                    return batch_loss(forward(p, x).projection, k_plus, labels, queue, tau, include_pos, class_aware)[0]

                num = finite_diff_gradient(f, params[pname], h)
                worst = max(worst, float(relative_error(grads[pname], num).max()))
            res.total += 1
            res.max_error = max(res.max_error, worst)
            if worst <= GRAD_TOL:
                res.passed += 1
            else:
                res.failures.append({"instance": i, "variant": name, "max_rel_error": worst,
                                     "dims": dims.as_tuple(), "seed": seed})
    return res


def _brute_qrs(keys, labels, snapshot):
    slots = [(y, k) for y, ks in enumerate(snapshot) for k in ks]
    kls = []
    for key, lab in zip(keys, labels):
        ex = [math.exp(math.fsum(float(a) * float(b) for a, b in zip(key, k))) for _, k in slots]
        zp = math.fsum(ex)
        qw = [math.e if y == lab else 1.0 for y, _ in slots]
        zq = math.fsum(qw)
        kls.append(math.fsum((e / zp) * math.log((e / zp) / (w / zq)) for e, w in zip(ex, qw)))
    total = sum((Fraction(v) for v in kls), Fraction(0))
    return [Fraction(v) * len(kls) <= total for v in kls], kls


def qrs_check(batches: int = 100, seed: int = 0) -> CheckResult:
    res = CheckResult("qrs")
    rng = np.random.default_rng(seed)
    for i in range(batches):
        K = int(rng.choice([2, 3, 5]))
        M = int(rng.choice([1, 2, 8]))
        B = int(rng.choice([1, 4, 64]))
        d = 8
        snap = [_unit(rng, M, d) for _ in range(K)]
        keys = _unit(rng, B, d)
        labels = rng.integers(0, K, B)
        verdict = select_updates(keys, labels, snap)
        expected, kls = _brute_qrs(keys, labels, snap)
        err = float(np.max(np.abs(verdict.kl - np.array(kls))))
        res.total += 1
        res.max_error = max(res.max_error, err)
        if verdict.selected.tolist() == expected:
            res.passed += 1
        else:
            res.failures.append({"batch": i, "K": K, "M": M, "B": B, "keys": keys.tolist(),
                                 "labels": labels.tolist(), "queue": [s.tolist() for s in snap]})
    return res


def queue_check(operations: int = 10_000, seed: int = 0) -> CheckResult:
    res = CheckResult("queue")
    rng = np.random.default_rng(seed)
    K, M, d = 5, 7, 4
    q = LesionQueue(K, M, d)
    ref = [deque(maxlen=M) for _ in range(K)]
    for op in range(operations):
        y = int(rng.integers(K))
        keys = _unit(rng, int(rng.integers(0, 10)), d)
        q.enqueue(y, keys)
        ref[y].extend(map(tuple, keys))
        res.total += 1
        lengths_ok = all(n <= M for n in q.lengths)
        probe = int(rng.integers(K))
        tags, _ = q.negatives_for(probe)
        match = q.class_keys(y).tolist() == [list(k) for k in ref[y]]
        if lengths_ok and match and probe not in tags:
            res.passed += 1
        else:
            res.failures.append({"operation": op, "class": y, "lengths": q.lengths.tolist(), "seed": seed})
            break
    final = all(q.class_keys(y).tolist() == [list(k) for k in ref[y]] for y in range(K))
    if not final:
        res.failures.append({"operation": "final-state", "seed": seed})
    return res


SUITES = {"grad": gradient_check, "qrs": qrs_check, "queue": queue_check}
