"""SI-SDR, permutation-invariant loss and angle-bucketed evaluation reports."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff import ops
from .errors import DataError

LOG_FLOOR = 1e-12
ANGLE_BUCKETS = ((0.0, 15.0), (15.0, 45.0), (45.0, 90.0), (90.0, 180.0))
BUCKET_LABELS = ("<15", "15-45", "45-90", ">90")


@dataclass
class SiSdrResult:
    value: float
    target_norm: float
    noise_norm: float

    def __float__(self):
        return float(self.value)


def _zero_mean(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=-1, keepdims=True)


def si_sdr(estimate, reference, mode: str = "eval") -> SiSdrResult:
    """Scale-invariant SDR in dB after removing the mean of both signals.

    In ``"eval"`` mode a perfect reconstruction yields ``+inf``; in
    ``"train"`` mode both log arguments are floored at ``1e-12``.

    >>> round(si_sdr([1, 0, 0, 0], [1, -1, 1, -1]).value, 4)
    -3.0103
    """
    est = _zero_mean(estimate)
    ref = _zero_mean(reference)
    if est.shape != ref.shape:
        raise DataError(f"length mismatch: estimate {est.shape} vs reference {ref.shape}")
    if est.shape[-1] < 2:
        raise DataError("signals need at least two samples")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0.0:
        raise DataError("reference is constant (zero energy after mean removal)")
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    t2 = float(np.dot(target, target))
    n2 = float(np.dot(noise, noise))
    if mode == "train":
        value = 10.0 * (math.log10(max(t2, LOG_FLOOR)) - math.log10(max(n2, LOG_FLOOR)))
    elif n2 == 0.0:
        value = math.inf
    elif t2 == 0.0:
        value = -math.inf
    else:
        value = 10.0 * math.log10(t2 / n2)
    return SiSdrResult(value, math.sqrt(t2), math.sqrt(n2))


def si_sdr_tensor(estimate: Tensor, reference) -> Tensor:
    """Differentiable training-mode SI-SDR over the last axis."""
    est = ops.sub(estimate, ops.mean(estimate, axis=-1, keepdims=True))
    ref = _zero_mean(reference.value if isinstance(reference, Tensor) else reference)
    ref_energy = np.sum(ref * ref, axis=-1, keepdims=True)
    if np.any(ref_energy == 0.0):
        raise DataError("reference is constant (zero energy after mean removal)")
    scale = ops.div(ops.sum(ops.mul(est, ref), axis=-1, keepdims=True), ref_energy)
    target = ops.mul(scale, ref)
    noise = ops.sub(est, target)
    t2 = ops.clamp_min(ops.sum(ops.square(target), axis=-1), LOG_FLOOR)
    n2 = ops.clamp_min(ops.sum(ops.square(noise), axis=-1), LOG_FLOOR)
    return ops.mul(ops.sub(ops.log10(t2), ops.log10(n2)), 10.0)


def _permutations(num_speakers: int):
    if not 1 <= num_speakers <= 4:
        raise DataError(f"PIT supports 1-4 speakers, got {num_speakers}")
    return list(itertools.permutations(range(num_speakers)))


def pit_loss(estimates, references, mode: str = "train") -> tuple[float, tuple[int, ...]]:
    """Negative mean SI-SDR under the best speaker assignment.

    ``perm[s]`` is the reference index assigned to estimate ``s``; the
    identity permutation wins ties.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    references = np.asarray(references, dtype=np.float64)
    if estimates.shape != references.shape or estimates.ndim != 2:
        raise DataError(f"shape mismatch: {estimates.shape} vs {references.shape}")
    n = estimates.shape[0]
    pair = [[si_sdr(estimates[i], references[j], mode).value for j in range(n)] for i in range(n)]
    best, best_perm = -math.inf, None
    for perm in _permutations(n):
        score = float(np.mean([pair[s][perm[s]] for s in range(n)]))
        if best_perm is None or score > best:
            best, best_perm = score, perm
    return -best, best_perm


def pit_loss_tensor(estimates: Tensor, references: np.ndarray) -> tuple[Tensor, list[tuple[int, ...]]]:
    """Batched differentiable PIT loss.

    ``estimates`` is ``[B, S, T]``, ``references`` ``[B, S, T]``. Returns the
    batch-mean loss and the chosen permutation per example.
    """
    b, s, _ = estimates.shape
    if references.shape != estimates.shape:
        raise DataError(f"shape mismatch: {estimates.shape} vs {references.shape}")
    perms = _permutations(s)
    # Pairwise SI-SDR [B, S_est, S_ref] in one vectorized call.
    est = ops.reshape(estimates, (b, s, 1, estimates.shape[2]))
    est = ops.add(est, np.zeros((1, 1, s, 1)))
    ref = np.broadcast_to(references[:, None, :, :], (b, s, s, references.shape[2]))
    pair = si_sdr_tensor(est, ref)                       # [B, S, S]
    losses = []
    chosen = []
    for i in range(b):
        scores = [float(np.mean([pair.value[i, k, perm[k]] for k in range(s)])) for perm in perms]
        best = int(np.argmax(scores))                    # first maximum -> identity on ties
        perm = perms[best]
        picked = ops.getitem(pair, (i, np.arange(s), np.array(perm)))
        losses.append(ops.mean(picked))
        chosen.append(perm)
    total = losses[0] if b == 1 else ops.sum(ops.stack(losses))
    return ops.mul(total, -1.0 / b), chosen


def si_sdr_improvement(estimate, reference, mixture_ref_channel) -> float:
    return si_sdr(estimate, reference).value - si_sdr(mixture_ref_channel, reference).value


def angle_bucket(angle_deg: float) -> int:
    """Index of the left-closed bucket ``[0,15) [15,45) [45,90) [90,180]``."""
    if angle_deg < 0 or angle_deg > 180:
        raise DataError(f"angle {angle_deg} outside [0, 180]")
    for i, (lo, hi) in enumerate(ANGLE_BUCKETS):
        if lo <= angle_deg < hi:
            return i
    return len(ANGLE_BUCKETS) - 1


@dataclass
class ExampleScore:
    id: str
    angle_deg: float
    si_sdr: float
    si_sdri: float
    permutation: tuple[int, ...]


@dataclass
class EvalReport:
    bucket_means: list[float]
    bucket_counts: list[int]
    overall_mean: float
    count: int
    excluded: int
    examples: list[ExampleScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "buckets": [
                {"label": label, "range_deg": list(rng), "mean_si_sdri": _json_float(m), "count": c}
                for label, rng, m, c in zip(BUCKET_LABELS, ANGLE_BUCKETS,
                                            self.bucket_means, self.bucket_counts)
            ],
            "overall_mean_si_sdri": _json_float(self.overall_mean),
            "count": self.count,
            "excluded_nonfinite": self.excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Aligned columns: one per angle bucket plus the average."""
        head = [f"{label:>8}" for label in BUCKET_LABELS] + [f"{'Ave.':>8}"]
        means = [_fmt(m) for m in self.bucket_means] + [_fmt(self.overall_mean)]
        counts = [f"{c:>8d}" for c in self.bucket_counts] + [f"{self.count:>8d}"]
        return "\n".join([
            "SI-SDRi (dB) by angle difference",
            f"{'':<8}" + "".join(head),
            f"{'mean':<8}" + "".join(means),
            f"{'n':<8}" + "".join(counts),
            f"excluded (non-finite): {self.excluded}",
        ]) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "angle_deg", "si_sdr", "si_sdri", "permutation"])
            for e in self.examples:
                w.writerow([e.id, repr(e.angle_deg), repr(e.si_sdr), repr(e.si_sdri),
                            " ".join(str(p) for p in e.permutation)])


def _json_float(x):
    return x if math.isfinite(x) else None


def _fmt(x) -> str:
    return f"{x:>8.2f}" if math.isfinite(x) else f"{'n/a':>8}"


def build_report(examples) -> EvalReport:
    """Aggregate per-example scores into bucket means.

    Examples are reduced in id order so the result is independent of the
    order (or parallelism) in which they were scored. Non-finite SI-SDRi
    values are counted and left out of every mean.
    """
    examples = sorted(examples, key=lambda e: e.id)
    sums = [0.0] * len(ANGLE_BUCKETS)
    counts = [0] * len(ANGLE_BUCKETS)
    excluded = 0
    for e in examples:
        if not math.isfinite(e.si_sdri):
            excluded += 1
            continue
        b = angle_bucket(e.angle_deg)
        sums[b] += e.si_sdri
        counts[b] += 1
    total = sum(counts)
    means = [s / c if c else math.nan for s, c in zip(sums, counts)]
    overall = sum(sums) / total if total else math.nan
    return EvalReport(means, counts, overall, total, excluded, examples)


def score_example(example_id: str, angle_deg: float, estimates, references, mixture_ref) -> ExampleScore:
    """PIT-align the estimates and compute mean SI-SDR and SI-SDRi for one example."""
    estimates = np.asarray(estimates, dtype=np.float64)
    references = np.asarray(references, dtype=np.float64)
    n = min(estimates.shape[-1], references.shape[-1], len(mixture_ref))
    estimates, references = estimates[:, :n], references[:, :n]
    mixture_ref = np.asarray(mixture_ref, dtype=np.float64)[:n]
    _, perm = pit_loss(estimates, references, mode="eval")
    sdr = [si_sdr(estimates[s], references[perm[s]]).value for s in range(len(perm))]
    sdri = [si_sdr_improvement(estimates[s], references[perm[s]], mixture_ref)
            for s in range(len(perm))]
    return ExampleScore(example_id, float(angle_deg), float(np.mean(sdr)), float(np.mean(sdri)),
                        tuple(int(p) for p in perm))


def evaluate_dataset(separate, manifest, jobs: int = 1) -> EvalReport:
    """Score ``separate(mixture_samples) -> [S, T']`` on every manifest entry.

    ``manifest`` is a path or a list of entries as written by the simulator.
    All referenced files are checked first; if any is missing nothing is
    scored. ``jobs > 1`` scores examples in a thread pool; the report does
    not depend on it.
    """
    import os
    from concurrent.futures import ThreadPoolExecutor

    from .room import read_manifest, resolve_entry_paths
    from .wav import read_wav

    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    base = os.path.dirname(os.fspath(manifest)) if not isinstance(manifest, list) else "."
    resolved = [resolve_entry_paths(e, base) for e in entries]
    missing = [p for mix, refs in resolved for p in (mix, *refs) if not os.path.exists(p)]
    if missing:
        raise DataError("missing files: " + ", ".join(missing))

    def run(i):
        e = entries[i]
        mix_path, ref_paths = resolved[i]
        mixture = read_wav(mix_path).samples
        refs = np.stack([read_wav(p).samples[0] for p in ref_paths])
        estimates = np.asarray(separate(mixture))
        return score_example(str(e["id"]), float(e["angle_diff_deg"]), estimates, refs, mixture[0])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(run, range(len(entries))))
    else:
        scores = [run(i) for i in range(len(entries))]
    return build_report(scores)
