"""One-parameter sweeps with tree-fingerprint tracking.

Sweep directory layout::

    sweep.json          the sweep spec (base config, parameter, values, repeats)
    manifest.json       run manifest of the sweep
    records.jsonl       one JSON record per finished point, append-only
    points/<i>/         build directory of point i
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import provenance
from .config import ExperimentConfig, apply_overrides, config_from_dict, config_to_dict
from .sim import SimilarityMatrix, group_categories

log = logging.getLogger("trunkrepro.sweep")

CSV_HEADER = ("value", "accuracy", "fingerprint", "depth", "mean_groups_per_node", "seed", "status")
RANGE_TOL = 1e-9


class SweepError(ValueError):
    pass


def expand_range(start: float, stop: float, step: float) -> list[float]:
    """Inclusive range; the endpoint is kept when within 1e-9 of a step boundary."""
    if step <= 0:
        raise SweepError(f"range step must be > 0, got {step}")
    if stop < start:
        raise SweepError(f"range stop {stop} is below start {start}")
    n = math.floor((stop - start) / step + RANGE_TOL)
    decimals = max(0, -math.floor(math.log10(step)) + 6)
    return [round(start + i * step, decimals) for i in range(n + 1)]


@dataclass
class SweepSpec:
    base_config: ExperimentConfig
    parameter: str
    values: list = field(default_factory=list)
    range: tuple | None = None
    repeats: int = 1
    fixed_tree: str | None = None  # tree.json path: train a fixed structure per point

    def __post_init__(self):
        if self.range is not None:
            if self.values:
                raise SweepError("give either values or range, not both")
            self.values = expand_range(*self.range)
        if not self.values:
            raise SweepError("sweep needs at least one value")
        if self.repeats < 1:
            raise SweepError(f"repeats must be >= 1, got {self.repeats}")
        for v in self.values:
            self.config_for(v)  # every point must validate up front

    def config_for(self, value) -> ExperimentConfig:
        return apply_overrides(self.base_config, [f"{self.parameter}={json.dumps(value)}"])

    def points(self) -> list[tuple[int, object, int]]:
        """(index, value, repeat) in execution order."""
        out = []
        for v in self.values:
            for r in range(self.repeats):
                out.append((len(out), v, r))
        return out

    def to_dict(self) -> dict:
        return {"base_config": config_to_dict(self.base_config), "parameter": self.parameter,
                "values": list(self.values), "repeats": self.repeats, "fixed_tree": self.fixed_tree}

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        return cls(config_from_dict(raw["base_config"]), raw["parameter"], list(raw["values"]),
                   None, raw.get("repeats", 1), raw.get("fixed_tree"))


@dataclass
class SweepRecord:
    index: int
    value: object
    repeat: int
    accuracy: float | None
    tree_fingerprint: str
    depth: int | None
    mean_groups_per_node: float | None
    build_dir: str
    seed: int
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _run_point(config: ExperimentConfig, build_dir: Path, fixed_tree, caps, root) -> SweepRecord:
    from .evaluator import evaluate_build
    from .tree import fingerprint, load_tree
    from .trainer import build_and_train, train_fixed_tree

    if fixed_tree:
        report = train_fixed_tree(config, load_tree(fixed_tree), build_dir, caps=caps, root=root)
    else:
        report = build_and_train(config, build_dir, caps=caps, root=root)
    result = evaluate_build(build_dir, config, cap=(caps or {}).get("test"), root=root)
    tree = report.tree
    return SweepRecord(0, None, 0, result.accuracy, fingerprint(tree), tree.depth,
                       tree.mean_groups_per_node, str(build_dir), config.seed)


def read_records(sweep_dir: str | os.PathLike) -> list[SweepRecord]:
    path = Path(sweep_dir) / "records.jsonl"
    if not path.exists():
        return []
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            try:
                records.append(SweepRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError):
                break  # torn final line from an interrupted write
    return records


def run_sweep(spec: SweepSpec, sweep_dir: str | os.PathLike, *, caps: dict | None = None,
              root=None, stop_after: int | None = None, runner=None) -> list[SweepRecord]:
    """Run (or resume) a sweep.  Completed points are skipped; failures are recorded.

    ``stop_after`` ends the run after that many newly completed points (for
    interruption drills); ``runner`` replaces the build+evaluate step.
    """
    sweep_dir = Path(sweep_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    spec_path = sweep_dir / "sweep.json"
    spec_text = json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n"
    if spec_path.exists() and spec_path.read_text() != spec_text:
        raise SweepError(f"{sweep_dir} holds a different sweep; use a fresh directory")
    spec_path.write_text(spec_text)
    provenance.save_manifest(provenance.capture(spec.base_config, root), sweep_dir)
    runner = runner or (lambda cfg, d: _run_point(cfg, d, spec.fixed_tree, caps, root))

    done = read_records(sweep_dir)
    # drop a torn tail so appends stay line-aligned
    with open(sweep_dir / "records.jsonl", "a+") as fh:
        fh.seek(0)
        lines = fh.read().splitlines()
    if len(lines) != len(done):
        (sweep_dir / "records.jsonl").write_text("".join(r.to_json() + "\n" for r in done))
    finished = {r.index for r in done}
    new = 0
    for index, value, repeat in spec.points():
        if index in finished:
            continue
        if stop_after is not None and new >= stop_after:
            break
        config = spec.config_for(value)
        build_dir = sweep_dir / "points" / str(index)
        try:
            record = runner(config, build_dir)
            record.index, record.value, record.repeat = index, value, repeat
        except Exception as exc:  # a failing point must not end the sweep
            log.warning("trunk sweep-point-failed index=%d value=%s error=%s", index, value, exc)
            record = SweepRecord(index, value, repeat, None, "", None, None, str(build_dir),
                                 config.seed, "failed",
                                 "".join(traceback.format_exception_only(type(exc), exc)).strip())
        with open(sweep_dir / "records.jsonl", "a") as fh:
            fh.write(record.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        log.info("trunk sweep-point index=%d value=%s status=%s accuracy=%s",
                 index, value, record.status, record.accuracy)
        new += 1
    return read_records(sweep_dir)


def distinct_trees(records) -> dict[str, list]:
    """fingerprint -> values that produced it, in record order; failed points skipped."""
    out: dict[str, list] = {}
    for r in records:
        if r.status == "ok":
            out.setdefault(r.tree_fingerprint, []).append(r.value)
    return out


def _fmt(v):
    return "" if v is None else v


def emit_csv(records, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.value, _fmt(r.accuracy), r.tree_fingerprint, _fmt(r.depth),
                             _fmt(r.mean_groups_per_node), r.seed, r.status])


def _num(text):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k in ("fingerprint", "status") else _num(v)) for k, v in row.items()}
            for row in rows]


def emit_plot(records, path: str | os.PathLike, parameter: str = "value") -> list[str]:
    """Accuracy against value, one colour per tree fingerprint; returns legend labels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise SweepError("nothing to plot: no successful records")
    groups = distinct_trees(ok)
    fig, ax = plt.subplots(figsize=(7, 4))
    cmap = plt.get_cmap("tab10" if len(groups) <= 10 else "tab20")
    labels = []
    for i, fp in enumerate(groups):
        pts = [r for r in ok if r.tree_fingerprint == fp]
        label = f"tree {i + 1} ({fp[:8]})"
        ax.scatter([r.value for r in pts], [r.accuracy for r in pts], color=cmap(i % cmap.N),
                   label=label)
        labels.append(label)
    ax.set_xlabel(parameter)
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return labels


def frozen_profile(sim: SimilarityMatrix, gv_values) -> list[dict]:
    """GV sweep on a fixed similarity matrix, no training: groups per value."""
    rows = []
    for gv in gv_values:
        g = group_categories(sim, gv)
        rows.append({"gv": gv, "groups": g.count, "partition": g.partition})
    return rows
