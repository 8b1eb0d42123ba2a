"""Object-level metrics, recall at a calibrated precision, and class-embedding
similarity.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import MixtureCrf, StatsCrf, UnaryModel, mixture_component, stats_score_table
from .model import CrfParams, FoldedCrf, fold_bn, left_factor, unary_scores
from .trellis import ScoreTable, forward_backward, node_marginals, viterbi

DECODE_MODES = ("viterbi", "marginal")


def error_rate(predicted, gold):
    predicted = np.asarray(predicted)
    gold = np.asarray(gold)
    if predicted.shape != gold.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {gold.shape}")
    if gold.size == 0:
        raise ValueError("no objects to score")
    return 100.0 * np.count_nonzero(predicted != gold) / gold.size


@dataclass
class EvalReport:
    error_rate: float
    precision: float
    recall: float
    threshold: float
    objects: int
    accepted: int
    correct_accepted: int
    precision_target: float
    target_met: bool

    KEYS = ("error_rate", "precision", "recall", "threshold", "objects", "accepted",
            "correct_accepted", "precision_target", "target_met")

    def to_text(self):
        lines = []
        for key in self.KEYS:
            val = getattr(self, key)
            if isinstance(val, float):
                val = f"{val:.4f}" if key != "threshold" else repr(val)
            lines.append(f"{key}: {val}")
        return "\n".join(lines)

    def to_tsv(self):
        return "\t".join(str(getattr(self, k)) for k in self.KEYS)


def recall_at_precision(confidences, predicted, gold, precision_target):
    """Accept objects whose confidence clears a threshold chosen over observed values.

    Returns the threshold with the highest recall among those meeting the
    precision target (ties toward the smaller threshold). When no threshold
    meets the target, the highest-precision point is returned with
    ``target_met`` False.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    correct = (np.asarray(predicted).ravel() == np.asarray(gold).ravel())
    if conf.size == 0:
        raise ValueError("no objects to evaluate")
    if not (conf.size == correct.size == np.asarray(gold).size):
        raise ValueError("confidences, predictions and gold labels differ in length")
    if not 0.0 <= precision_target <= 100.0:
        raise ValueError("precision_target must lie in [0, 100]")
    N = conf.size
    order = np.argsort(conf, kind="stable")
    sorted_conf = conf[order]
    # correct_at_or_above[i] = number of correct objects among sorted positions >= i
    correct_at_or_above = np.concatenate([np.cumsum(correct[order][::-1])[::-1], [0]])
    taus = np.unique(sorted_conf)
    first = np.searchsorted(sorted_conf, taus, side="left")
    accepted = N - first
    ca = correct_at_or_above[first]
    feasible = ca * 100.0 >= precision_target * accepted
    if feasible.any():
        cand = np.flatnonzero(feasible)
        met = True
    else:
        precision = ca / accepted
        cand = np.flatnonzero(precision == precision.max())
        met = False
    # recall only grows as the threshold drops, so the smallest candidate wins
    i = cand[np.argmax(ca[cand])]
    return EvalReport(
        error_rate=100.0 * (N - int(correct.sum())) / N,
        precision=100.0 * ca[i] / accepted[i],
        recall=100.0 * ca[i] / N,
        threshold=float(taus[i]),
        objects=N,
        accepted=int(accepted[i]),
        correct_accepted=int(ca[i]),
        precision_target=float(precision_target),
        target_met=met,
    )


# -- decoding any trained model -----------------------------------------------

def _features(model, seq):
    fs = getattr(model, "feature_stats", None)
    return seq.features if fs is None else fs.apply(seq.features)


def score_table(model, features):
    """Chain scores of one sequence under any supported model type."""
    if isinstance(model, CrfParams):
        model = fold_bn(model)
    if isinstance(model, FoldedCrf):
        return ScoreTable(unary_scores(model, features), model.P)
    if isinstance(model, UnaryModel):
        return ScoreTable(model.log_probs(features), np.zeros((model.m, model.m)))
    if isinstance(model, StatsCrf):
        return stats_score_table(model.unary.log_probs(features), model.stats, model.weight)
    if isinstance(model, MixtureCrf):
        logp = model.unary.log_probs(features)
        c = mixture_component(model.mixture, logp)
        return stats_score_table(logp, model.mixture.component_stats(c), model.weight)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def decode_sequence(model, seq, mode="viterbi"):
    """(labels, confidences): confidence is the marginal of the chosen label."""
    st = score_table(model, _features(model, seq))
    marg = node_marginals(forward_backward(st))
    if mode == "viterbi":
        labels = viterbi(st)[0]
    elif mode == "marginal":
        labels = np.argmax(marg, axis=1)
    else:
        raise ValueError(f"mode must be one of {DECODE_MODES}")
    return labels, marg[np.arange(len(labels)), labels]


def predict(model, dataset, mode="viterbi", threads=1):
    """Decode every sequence; results keep the dataset order for any thread count."""
    if isinstance(model, CrfParams):
        model = fold_bn(model)

    def one(seq):
        return decode_sequence(model, seq, mode)

    if threads <= 1:
        return [one(seq) for seq in dataset.sequences]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, dataset.sequences))


def evaluate(model, dataset, precision_target=91.0, mode="viterbi", threads=1):
    results = predict(model, dataset, mode, threads)
    labels = np.concatenate([r[0] for r in results])
    conf = np.concatenate([r[1] for r in results])
    gold = np.concatenate(dataset.label_sequences())
    return recall_at_precision(conf, labels, gold, precision_target)


# -- embeddings ---------------------------------------------------------------

def nearest_neighbors(embedding, cls, top_k=5):
    """Other classes ranked by cosine similarity of embedding columns.

    Returns ``[(class, cosine), ...]`` in descending similarity, ties by index.
    """
    E = np.asarray(embedding, dtype=np.float64)
    m = E.shape[1]
    if not 0 <= cls < m:
        raise ValueError(f"class {cls} outside [0, {m})")
    norms = np.linalg.norm(E, axis=0)
    if norms[cls] == 0:
        raise ValueError(f"class {cls} has a zero embedding")
    others = np.array([j for j in range(m) if j != cls])
    if np.any(norms[others] == 0):
        raise ValueError("embedding has zero-norm columns")
    cos = (E[:, others].T @ E[:, cls]) / (norms[others] * norms[cls])
    order = np.lexsort((others, -cos))[:top_k]
    return [(int(others[i]), float(cos[i])) for i in order]


def class_embedding(params, which="R"):
    """``R`` (raw), ``R_bn`` (BN-standardized left factor) or ``Q``."""
    if which == "R":
        return params.R
    if which == "R_bn":
        return left_factor(params)
    if which == "Q":
        return params.Q
    raise ValueError(f"unknown embedding {which!r}")


def export_embeddings(params, path):
    """One line per class: index, then the R column, then the Q column."""
    with open(path, "w") as fh:
        for j in range(params.dims.m):
            vals = [repr(float(v)) for v in np.concatenate([params.R[:, j], params.Q[:, j]])]
            fh.write(" ".join([str(j)] + vals) + "\n")


def load_embeddings(path):
    """Inverse of :func:`export_embeddings`: returns ``(R, Q)``."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                parts = line.split()
                rows.append((int(parts[0]), [float(v) for v in parts[1:]]))
    rows.sort()
    vecs = np.array([r[1] for r in rows])
    d = vecs.shape[1] // 2
    return vecs[:, :d].T.copy(), vecs[:, d:].T.copy()
