# src/eval_harness.py
#
# Retrieval metrics over a CodeIndex and a set of encoded queries.
#
# Key operations:
#   - average_precision / map_at: MAP over the top-T ranking, denominator min(R_total, T)
#   - precision_at_t on a grid of T values
#   - precision_at_radius: per-query precision inside a Hamming ball (empty ball counts 0)
#   - pr_curve: Hamming-threshold sweep r = 0..k, averaged over queries
#   - time_queries: scan-only latency with a discarded warm-up pass
#   - EvalReport -> JSON-lines report, timing file, CSV + SVG curves
#
# Notes:
#   - Queries arrive already encoded ([N_q, k] +-1 codes); encoding time never enters the
#     latency measurement.
#   - The report file holds no wall-clock values so identical runs give identical bytes;
#     latency goes to the separate timing file.


import json
import os
import time
from dataclasses import dataclass, field
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import DataError, StorageError
from retrieval_index import BinaryCode, pack_codes

REPORT_SCHEMA = "texhash.eval/1"


def _query_codes(index, codes):
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != index.k:
        raise DataError(f"queries must be an [N, {index.k}] code matrix, got shape {codes.shape}")
    return [BinaryCode(index.k, words) for words in pack_codes(codes)]


def _check_disjoint(index, query_ids):
    if query_ids is not None and np.intersect1d(np.asarray(query_ids, dtype=np.uint64), index.ids).size:
        raise DataError("query ids overlap index ids; queries must be held out from the index")


# === Average precision ===
def average_precision(rel, r_total):
    """Sum of precision@t at relevant ranks, divided by min(r_total, T)."""
    rel = np.asarray(rel, dtype=bool)
    denom = min(int(r_total), rel.size)
    if denom == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / denom)


def map_at(index, query_codes, query_labels, top, query_ids=None):
    """Mean AP over queries; relevance is label equality with index items."""
    _check_disjoint(index, query_ids)
    labels = np.asarray(query_labels)
    aps = []
    for q, label in zip(_query_codes(index, query_codes), labels):
        order, _ = index.ranking(q, top)
        rel = index.labels[order] == label
        aps.append(average_precision(rel, np.count_nonzero(index.labels == label)))
    return float(np.mean(aps)) if aps else 0.0


def precision_at_t(index, query_codes, query_labels, t_grid):
    """[(T, mean precision over the top-T)] for each T in the grid."""
    queries = _query_codes(index, query_codes)
    labels = np.asarray(query_labels)
    points = []
    for top in t_grid:
        values = []
        for q, label in zip(queries, labels):
            order, _ = index.ranking(q, top)
            values.append(np.mean(index.labels[order] == label) if order.size else 0.0)
        points.append((int(top), float(np.mean(values)) if values else 0.0))
    return points


# === Hamming-ball metrics ===
def _ball_counts(index, q, label):
    """Cumulative (retrieved, relevant) counts for every radius 0..k."""
    d = index.distances(q)
    rel = index.labels == label
    retrieved = np.cumsum(np.bincount(d, minlength=index.k + 1))
    relevant = np.cumsum(np.bincount(d[rel], minlength=index.k + 1))
    return retrieved, relevant, int(np.count_nonzero(rel))


def precision_at_radius(index, query_codes, query_labels, radius=2):
    if radius < 0:
        raise DataError(f"radius must be >= 0, got {radius}")
    radius = min(radius, index.k)
    values = []
    for q, label in zip(_query_codes(index, query_codes), np.asarray(query_labels)):
        retrieved, relevant, _ = _ball_counts(index, q, label)
        values.append(relevant[radius] / retrieved[radius] if retrieved[radius] else 0.0)
    return float(np.mean(values)) if values else 0.0


def pr_curve(index, query_codes, query_labels):
    """k + 1 (recall, precision) points, one per Hamming threshold r = 0..k."""
    queries = _query_codes(index, query_codes)
    labels = np.asarray(query_labels)
    recall = np.zeros(index.k + 1)
    precision = np.zeros(index.k + 1)
    for q, label in zip(queries, labels):
        retrieved, relevant, r_total = _ball_counts(index, q, label)
        if r_total:
            recall += relevant / r_total
        precision += np.divide(relevant, retrieved, out=np.zeros(index.k + 1), where=retrieved > 0)
    n = max(len(queries), 1)
    return [(float(r), float(p)) for r, p in zip(recall / n, precision / n)]


# === Latency ===
def time_queries(index, query_codes, repetitions=5, top=50):
    """Mean wall-clock seconds per top-T scan; one warm-up pass discarded."""
    if repetitions < 3:
        raise DataError(f"repetitions must be >= 3, got {repetitions}")
    queries = _query_codes(index, query_codes)
    if not queries or len(index) == 0:
        return 0.0
    for q in queries:
        index.ranking(q, top)
    elapsed = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for q in queries:
            index.ranking(q, top)
        elapsed.append(time.perf_counter() - start)
    return float(np.mean(elapsed) / len(queries))


# === Report ===
@dataclass
class EvalReport:
    code_bits: int
    top_t: int
    radius: int
    n_index: int
    n_queries: int
    map_at_t: float
    precision_at_t: list
    precision_radius: float
    pr_curve: list
    mean_query_seconds: float = 0.0
    config: dict = field(default_factory=dict)


def evaluate(index, query_codes, query_labels, top_t, radius=2, t_grid=(10, 20, 50, 100), repetitions=5,
             config=None, query_ids=None, progress=False):
    """Every metric for one (index, queries) pair."""
    steps = tqdm(total=5, desc="Evaluating", disable=not progress)
    report_map = map_at(index, query_codes, query_labels, top_t, query_ids)
    steps.update()
    p_at_t = precision_at_t(index, query_codes, query_labels, t_grid)
    steps.update()
    p_radius = precision_at_radius(index, query_codes, query_labels, radius)
    steps.update()
    curve = pr_curve(index, query_codes, query_labels)
    steps.update()
    latency = time_queries(index, query_codes, repetitions, top_t)
    steps.update()
    steps.close()
    return EvalReport(
        code_bits=index.k, top_t=int(top_t), radius=int(radius), n_index=len(index),
        n_queries=len(query_labels), map_at_t=report_map, precision_at_t=p_at_t,
        precision_radius=p_radius, pr_curve=curve, mean_query_seconds=latency, config=dict(config or {}),
    )


def report_records(report, config_echo=None):
    """Ordered report records (no latency)."""
    records = []
    for key, value in sorted((config_echo if config_echo is not None else report.config).items()):
        records.append({"type": "config", "key": key, "value": value})
    records.append({"type": "summary", "code_bits": report.code_bits, "n_index": report.n_index,
                    "n_queries": report.n_queries})
    records.append({"type": "metric", "name": "map_at_t", "T": report.top_t, "value": report.map_at_t})
    records.append({"type": "metric", "name": "precision_radius", "radius": report.radius,
                    "value": report.precision_radius})
    for top, value in report.precision_at_t:
        records.append({"type": "curve", "curve": "precision_at_t", "T": top, "precision": value})
    for r, (recall, precision) in enumerate(report.pr_curve):
        records.append({"type": "curve", "curve": "pr", "r": r, "recall": recall, "precision": precision})
    return records


def _json_value(value):
    return list(value) if isinstance(value, tuple) else value


def write_report_jsonl(report, path, config_echo=None):
    lines = [
        json.dumps({"schema": REPORT_SCHEMA, "record": {k: _json_value(v) for k, v in record.items()}},
                   sort_keys=True, separators=(",", ":"))
        for record in report_records(report, config_echo)
    ]
    _write_text(path, "\n".join(lines) + "\n")


def read_report_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line)["record"] for line in fh if line.strip()]


def write_timing(report, path):
    payload = {"schema": REPORT_SCHEMA, "code_bits": report.code_bits, "n_index": report.n_index,
               "n_queries": report.n_queries, "mean_query_seconds": report.mean_query_seconds}
    _write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def _write_text(path, text):
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from None


# === Curves: CSV + SVG ===
def emit_curve(points, x_name, y_name, out_stem, title):
    """Write `<out_stem>.csv` (header x_name,y_name) and `<out_stem>.svg`."""
    df = pd.DataFrame(points, columns=[x_name, y_name])
    csv_path, svg_path = f"{out_stem}.csv", f"{out_stem}.svg"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out_stem)), exist_ok=True)
        df.to_csv(csv_path, index=False, lineterminator="\n", float_format="%.10g")

        with plt.rc_context({"svg.hashsalt": "texhash", "svg.fonttype": "none"}):
            fig, ax = plt.subplots(figsize=(6, 4.5))
            ax.plot(df[x_name], df[y_name], marker="o", linewidth=1.5)
            ax.set_title(title)
            ax.set_xlabel(x_name)
            ax.set_ylabel(y_name)
            ax.grid(alpha=0.5)
            fig.savefig(svg_path, format="svg", bbox_inches="tight", metadata={"Date": None})
            plt.close(fig)
    except OSError as exc:
        raise StorageError(f"cannot write curve {out_stem}: {exc}") from None
    return csv_path, svg_path


def emit_plots(report, out_dir):
    """PR curve and precision@T curve, each as CSV + SVG."""
    paths = []
    paths += emit_curve(report.pr_curve, "recall", "precision", os.path.join(out_dir, "pr_curve"),
                        f"Precision vs recall ({report.code_bits} bits)")
    paths += emit_curve(report.precision_at_t, "T", "precision", os.path.join(out_dir, "precision_at_t"),
                        f"Precision vs top-T ({report.code_bits} bits)")
    return paths
