"""README scaffolding for a finished build: summary, environment, training,
inference, weights and results, in that order."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .config import load_config

SECTIONS = (
    "Summary",
    "Environment setup",
    "Training",
    "Inference",
    "Pre-trained weights",
    "Results",
)
PENDING = "pending"


def _fmt_flops(value) -> str:
    return f"{value / 1e6:.3f} MFLOPs"


def report_scaffold(build_dir: str | os.PathLike, output_path: str | os.PathLike) -> str:
    """Write the README and return its text.  Output is a pure function of the
    build directory contents, so regeneration is byte-stable."""
    build_dir = Path(build_dir)
    build_json = build_dir / "build.json"
    if not build_json.exists():
        raise FileNotFoundError(f"no completed build in {build_dir}")
    build = json.loads(build_json.read_text())
    if build.get("status") != "complete":
        raise RuntimeError(f"build in {build_dir} is {build.get('status')!r}, not complete")
    config = load_config(build_dir / "config.yaml")
    dataset = config.dataset
    backbone = config.model_backbone
    gv = config.grouping_volatility
    eval_path = build_dir / "eval.json"
    result = json.loads(eval_path.read_text()) if eval_path.exists() else None

    out = Path(output_path)
    try:
        weights_ref = os.path.relpath(build_dir / "nodes", out.parent)
    except ValueError:
        weights_ref = str(build_dir / "nodes")

    lines = [f"# TRUNK on {dataset}", ""]
    lines += [f"## 1. {SECTIONS[0]}", "",
              "_Describe the method, the question studied and the main findings here._", ""]
    lines += [f"## 2. {SECTIONS[1]}", "", "```bash",
              "# To install software dependencies using pip",
              "pip install -r requirements.txt", "",
              "# To install software dependencies using conda",
              "conda env create -f environment.yaml",
              "conda activate trunk", "```", ""]
    lines += [f"## 3. {SECTIONS[2]}", "", "```bash",
              f"# To train the model(s) on {dataset}, run this command:",
              f"python -m trunkrepro --train --dataset {dataset} --model_backbone {backbone} "
              f"--grouping_volatility {gv}", "```", ""]
    lines += [f"## 4. {SECTIONS[3]}", "", "```bash",
              f"# To evaluate the model on {dataset}, run:",
              f"python -m trunkrepro --infer --dataset {dataset} --model_backbone {backbone} "
              f"--grouping_volatility {gv}", "```", ""]
    lines += [f"## 5. {SECTIONS[4]}", "", "| Dataset | Backbone | Weights |", "|---|---|---|",
              f"| {dataset} | {backbone} | [{weights_ref}]({weights_ref}) |", ""]
    lines += [f"## 6. {SECTIONS[5]}", "",
              "| Dataset | Accuracy (%) | Mean FLOPs / image | Inference time (s) |",
              "|---|---|---|---|"]
    if result is None:
        lines.append(f"| {dataset} | {PENDING} | {PENDING} | {PENDING} |")
    else:
        lines.append(f"| {dataset} | {100 * result['accuracy']:.2f} | "
                     f"{_fmt_flops(result['mean_flops_per_image'])} | {result['total_time']:.3f} |")
    lines.append("")
    text = "\n".join(lines)
    out.write_text(text, encoding="utf-8")
    return text
