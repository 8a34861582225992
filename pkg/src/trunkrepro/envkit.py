"""Minimal dependency manifests from static import scanning.

Only packages imported directly by the source tree are listed.  The scan never
executes code: ``importlib.import_module`` / ``__import__`` calls are reported
as unresolved instead of guessed.  Standard-library names come from a list
pinned to CPython 3.9 (``stdlib_py39.txt``) so results do not drift with the
interpreter running the scan.
"""

from __future__ import annotations

import ast
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

STDLIB_VERSION = "3.9"
_STDLIB_FILE = Path(__file__).parent / "stdlib_py39.txt"

# import name -> pip distribution name; extend via the ``mapping`` arguments
IMPORT_TO_PACKAGE = {
    "sklearn": "scikit-learn",
    "cv2": "opencv-python",
    "PIL": "Pillow",
    "yaml": "PyYAML",
    "skimage": "scikit-image",
    "bs4": "beautifulsoup4",
}
# pip distribution name -> conda package name
PIP_TO_CONDA = {"torch": "pytorch"}

# manifest entries that describe the runtime rather than an imported package
RUNTIME_ENTRIES = {"python", "pip", "pytorch-cuda", "cudatoolkit"}
RUNTIME_PREFIXES = ("cuda-",)

_GPU_URL = re.compile(r"download\.pytorch\.org/whl/cu|/cu\d+")


class ManifestError(ValueError):
    pass


def stdlib_names() -> frozenset:
    lines = _STDLIB_FILE.read_text().splitlines()
    return frozenset(l.strip() for l in lines if l.strip() and not l.startswith("#"))


def normalize(name: str) -> str:
    return re.sub(r"[-_.]+", "-", name).lower()


@dataclass
class DependencySet:
    names: list = field(default_factory=list)
    find_links: str | None = None
    pins: dict = field(default_factory=dict)
    unresolved: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.names = sorted(set(self.names))


# ---------------------------------------------------------------------------
# scanning


def _internal_modules(root: Path, files) -> set:
    names = set()
    for path in files:
        rel = path.relative_to(root)
        names.add(rel.parts[0] if len(rel.parts) > 1 else path.stem)
        names.add(path.stem)
        for parent in rel.parts[:-1]:
            names.add(parent)
    return names


def _dynamic_call(node: ast.Call) -> str | None:
    func = node.func
    if isinstance(func, ast.Name) and func.id == "__import__":
        return "__import__"
    if isinstance(func, ast.Attribute) and func.attr == "import_module":
        return "import_module"
    return None


def scan_imports(source_root: str | os.PathLike) -> DependencySet:
    """Top-level external import names under ``source_root``."""
    root = Path(source_root)
    if not root.is_dir():
        raise NotADirectoryError(f"not a directory: {root}")
    files = sorted(p for p in root.rglob("*.py") if p.is_file())
    internal = _internal_modules(root, files)
    stdlib = stdlib_names()
    found, unresolved, warnings = set(), [], []
    for path in files:
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"), filename=str(path))
        except (OSError, UnicodeDecodeError, SyntaxError) as exc:
            warnings.append(f"skipped {path.relative_to(root)}: {type(exc).__name__}: {exc}")
            continue
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                found.update(alias.name.split(".")[0] for alias in node.names)
            elif isinstance(node, ast.ImportFrom) and node.level == 0 and node.module:
                found.add(node.module.split(".")[0])
            elif isinstance(node, ast.Call) and _dynamic_call(node):
                unresolved.append(f"{path.relative_to(root)}:{node.lineno}: dynamic import via "
                                  f"{_dynamic_call(node)}")
    names = sorted(n for n in found if n not in stdlib and n not in internal)
    return DependencySet(names, unresolved=unresolved, warnings=warnings)


def package_names(deps: DependencySet, mapping: dict | None = None) -> tuple[list, list]:
    """Distribution names for ``deps`` plus notes for names passed through unmapped."""
    table = {**IMPORT_TO_PACKAGE, **(mapping or {})}
    out, notes = [], []
    for name in deps.names:
        if name in table:
            out.append(table[name])
        else:
            out.append(name)
            notes.append(f"{name}: no mapping entry, distribution name assumed equal to import name")
    return sorted(set(out), key=str.lower), notes


# ---------------------------------------------------------------------------
# emitting


def emit_pip_manifest(deps: DependencySet, mapping: dict | None = None) -> str:
    names, _ = package_names(deps, mapping)
    lines = []
    if deps.find_links:
        lines.append(f"--find-links {deps.find_links}")
    for name in names:
        pin = deps.pins.get(name)
        lines.append(f"{name}=={pin}" if pin else name)
    return "".join(line + "\n" for line in lines)


def emit_conda_manifest(deps: DependencySet, env_name: str = "trunk",
                        channels=("pytorch", "nvidia", "defaults"), pip_section=(),
                        runtime: dict | None = None, builds: dict | None = None,
                        mapping: dict | None = None) -> str:
    """Conda environment file.

    ``pip_section`` lists distributions installed through pip instead of conda;
    ``runtime`` adds non-imported entries such as ``{"python": "3.9.18"}``;
    ``builds`` maps a conda name to its build tag so pins render as
    ``name=version=build``.
    """
    names, _ = package_names(deps, mapping)
    pip_names = {normalize(n) for n in pip_section}
    builds = builds or {}
    pins = {PIP_TO_CONDA.get(k, k): v for k, v in deps.pins.items()}
    pins.update(runtime or {})
    conda = {PIP_TO_CONDA.get(n, n) for n in names if normalize(n) not in pip_names}
    conda |= set(runtime or {})

    def entry(name):
        version = pins.get(name)
        if version is None:
            return name
        build = builds.get(name)
        return f"{name}={version}={build}" if build else f"{name}={version}"

    lines = [f"name: {env_name}"]
    if channels:
        lines.append("channels:")
        lines += [f"  - {c}" for c in channels]
    pip_list = sorted((n for n in names if normalize(n) in pip_names), key=str.lower)
    pip_list += sorted((n for n in pip_section if normalize(n) not in {normalize(x) for x in names}),
                       key=str.lower)
    if conda or pip_list:
        lines.append("dependencies:")
        lines += [f"  - {entry(n)}" for n in sorted(conda, key=str.lower)]
        if pip_list:
            lines.append("  - pip:")
            lines += [f"    - {n}" for n in pip_list]
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# parsing and validation


@dataclass
class ParsedManifest:
    kind: str  # "pip" or "conda"
    entries: list  # (raw name, version spec or None)
    index_urls: list
    channels: list
    builds: dict


_REQ = re.compile(r"^\s*([A-Za-z0-9][A-Za-z0-9._-]*)\s*(\[[^\]]*\])?\s*(.*)$")


def parse_pip_manifest(text: str) -> ParsedManifest:
    entries, urls = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(" #")[0].strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("-"):
            opt, _, value = line.replace("=", " ", 1).partition(" ")
            if opt in ("--find-links", "-f", "--index-url", "-i", "--extra-index-url"):
                urls.append(value.strip())
                continue
            if opt in ("-r", "--requirement", "-c", "--constraint", "-e", "--editable"):
                continue
            raise ManifestError(f"line {lineno}: unsupported option {opt!r}")
        m = _REQ.match(line.split(";")[0])
        if not m:
            raise ManifestError(f"line {lineno}: cannot parse requirement {raw!r}")
        entries.append((m.group(1), m.group(3).strip() or None))
    return ParsedManifest("pip", entries, urls, [], {})


def parse_conda_manifest(text: str) -> ParsedManifest:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ManifestError(f"malformed conda environment file: {exc}") from exc
    if not isinstance(raw, dict) or "dependencies" not in raw and "name" not in raw:
        raise ManifestError("conda environment file needs a mapping with name/dependencies")
    entries, builds, urls = [], {}, []
    for dep in raw.get("dependencies") or []:
        if isinstance(dep, dict) and "pip" in dep:
            pip = parse_pip_manifest("\n".join(str(x) for x in dep["pip"] or []))
            entries += pip.entries
            urls += pip.index_urls
            continue
        if not isinstance(dep, str):
            raise ManifestError(f"unexpected dependency entry {dep!r}")
        spec = dep.split("::")[-1]
        m = re.match(r"^([A-Za-z0-9][A-Za-z0-9._-]*)\s*(.*)$", spec)
        if not m:
            raise ManifestError(f"cannot parse dependency {dep!r}")
        name, rest = m.group(1), m.group(2).strip()
        parts = rest.lstrip("=").split("=") if rest.startswith("=") and not rest.startswith("==") else [rest]
        if len(parts) >= 2:
            builds[name] = parts[1]
        entries.append((name, rest or None))
    channels = [str(c) for c in raw.get("channels") or []]
    return ParsedManifest("conda", entries, urls, channels, builds)


def parse_manifest(path: str | os.PathLike) -> ParsedManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yml", ".yaml"):
        return parse_conda_manifest(text)
    return parse_pip_manifest(text)


def _is_runtime(name: str) -> bool:
    n = normalize(name)
    return n in RUNTIME_ENTRIES or n.startswith(RUNTIME_PREFIXES)


def gpu_hint(parsed: ParsedManifest) -> bool:
    if any(_GPU_URL.search(u) for u in parsed.index_urls):
        return True
    if parsed.kind == "conda":
        if "nvidia" in parsed.channels:
            return True
        names = {normalize(n) for n, _ in parsed.entries}
        if names & {"pytorch-cuda", "cudatoolkit"}:
            return True
        if any("cuda" in b for b in parsed.builds.values()):
            return True
    return False


@dataclass
class ManifestReport:
    missing: list
    extra: list
    gpu_hint_present: bool
    warnings: list = field(default_factory=list)
    unresolved: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"missing: {', '.join(self.missing) or '(none)'}",
            f"extra: {', '.join(self.extra) or '(none)'}",
            f"gpu hint: {'present' if self.gpu_hint_present else 'absent'}",
        ]
        lines += [f"warning: {w}" for w in self.warnings]
        lines += [f"unresolved: {u}" for u in self.unresolved]
        return "\n".join(lines) + "\n"


def validate_manifest(manifest_path: str | os.PathLike, source_root: str | os.PathLike,
                      mapping: dict | None = None) -> ManifestReport:
    parsed = parse_manifest(manifest_path)
    deps = scan_imports(source_root)
    wanted, _ = package_names(deps, mapping)
    conda_to_pip = {v: k for k, v in PIP_TO_CONDA.items()}
    declared = {}
    for name, _ in parsed.entries:
        if _is_runtime(name):
            continue
        key = normalize(conda_to_pip.get(name, name))
        declared.setdefault(key, name)
    wanted_keys = {normalize(n): n for n in wanted}
    missing = sorted(wanted_keys[k] for k in set(wanted_keys) - set(declared))
    extra = sorted(declared[k] for k in set(declared) - set(wanted_keys))
    has_hint = gpu_hint(parsed)
    warnings = list(deps.warnings)
    if "torch" in deps.names and not has_hint:
        warnings.append("source imports torch but the manifest names no CUDA wheel index or "
                        "GPU channel; installers will fall back to CPU-only builds")
    return ManifestReport(missing, extra, has_hint, warnings, list(deps.unresolved))
