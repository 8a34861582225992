import json

import pytest
from hypothesis import given, settings, strategies as st

from trunkrepro.envkit import (
    DependencySet,
    ManifestError,
    emit_conda_manifest,
    emit_pip_manifest,
    gpu_hint,
    package_names,
    parse_conda_manifest,
    parse_pip_manifest,
    scan_imports,
    stdlib_names,
    validate_manifest,
)

from conftest import FIXTURES, GOLDEN, PACKAGE

PROJ = FIXTURES / "import_tree"


def write(root, files):
    for name, text in files.items():
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return root


def test_stdlib_only_tree_has_no_dependencies(tmp_path):
    write(tmp_path, {"a.py": "import os, json\nfrom collections import deque\nimport asyncio.tasks\n"})
    deps = scan_imports(tmp_path)
    assert deps.names == [] and emit_pip_manifest(deps) == ""


def test_stdlib_list_is_pinned():
    names = stdlib_names()
    assert {"os", "json", "asyncio", "formatter", "parser"} <= names
    assert "numpy" not in names


def test_fixture_scan_excludes_internal_and_relative():
    deps = scan_imports(PROJ)
    assert deps.names == ["numpy", "scipy", "torch", "torchvision"]
    assert deps.unresolved == [] and deps.warnings == []


def test_dynamic_imports_reported_not_guessed(tmp_path):
    write(tmp_path, {"m.py": "import importlib\nmod = importlib.import_module('pandas')\n__import__('x')\n"})
    deps = scan_imports(tmp_path)
    assert deps.names == []
    assert len(deps.unresolved) == 2 and "m.py:2" in deps.unresolved[0]


def test_unreadable_file_skipped_with_warning(tmp_path):
    write(tmp_path, {"ok.py": "import numpy\n", "bad.py": "def broken(:\n"})
    deps = scan_imports(tmp_path)
    assert deps.names == ["numpy"]
    assert any("bad.py" in w for w in deps.warnings)


def test_mapping_and_user_extension():
    deps = DependencySet(["yaml", "sklearn", "acme"])
    names, notes = package_names(deps)
    assert names == ["acme", "PyYAML", "scikit-learn"]
    assert any(n.startswith("acme:") for n in notes)
    names, _ = package_names(deps, {"acme": "acme-tools"})
    assert "acme-tools" in names


def test_pins_and_find_links():
    deps = DependencySet(["torch", "numpy"], find_links="https://example.org/whl", pins={"torch": "2.1.0"})
    assert emit_pip_manifest(deps) == "--find-links https://example.org/whl\nnumpy\ntorch==2.1.0\n"


def test_conda_build_strings_and_pip_section():
    deps = DependencySet(["torch", "numpy", "yaml"], pins={"torch": "2.1.0"})
    text = emit_conda_manifest(deps, pip_section=["PyYAML"], runtime={"python": "3.9.18"},
                               builds={"pytorch": "py3.9_cuda12.1_cudnn8.9.2_0"})
    assert "  - pytorch=2.1.0=py3.9_cuda12.1_cudnn8.9.2_0\n" in text
    assert "  - python=3.9.18\n" in text
    assert text.endswith("  - pip:\n    - PyYAML\n")
    parsed = parse_conda_manifest(text)
    assert gpu_hint(parsed)


def test_emission_is_idempotent():
    deps = scan_imports(PROJ)
    assert emit_pip_manifest(deps) == emit_pip_manifest(scan_imports(PROJ))
    assert emit_conda_manifest(deps) == emit_conda_manifest(scan_imports(PROJ))


def test_generated_manifests_validate_clean(tmp_path):
    deps = scan_imports(PROJ)
    deps.find_links = "https://download.pytorch.org/whl/cu121"
    (tmp_path / "requirements.txt").write_text(emit_pip_manifest(deps))
    (tmp_path / "environment.yaml").write_text(emit_conda_manifest(deps))
    for name in ("requirements.txt", "environment.yaml"):
        report = validate_manifest(tmp_path / name, PROJ)
        assert (report.missing, report.extra) == ([], []), name
        assert report.gpu_hint_present
        assert not report.warnings


def test_golden_manifests_validate(tmp_path):
    report = validate_manifest(GOLDEN / "pip_requirements.txt", PROJ)
    assert (report.missing, report.extra, report.gpu_hint_present) == ([], [], True)
    conda = validate_manifest(GOLDEN / "conda_environment.yaml", PROJ)
    assert conda.missing == [] and conda.gpu_hint_present


def test_missing_gpu_hint_warns(tmp_path):
    (tmp_path / "r.txt").write_text("numpy\nscipy\ntorch\ntorchvision\n")
    report = validate_manifest(tmp_path / "r.txt", PROJ)
    assert not report.gpu_hint_present
    assert any("CUDA" in w for w in report.warnings)
    assert json.loads(report.to_json())["gpu_hint_present"] is False
    assert "gpu hint: absent" in report.to_text()


def test_missing_and_extra_reported():
    report = validate_manifest(FIXTURES / "manifest_with_extras.txt", PROJ)
    assert report.extra == ["anaconda-client", "blaze", "clyent"]
    assert report.missing == []


def test_unparseable_manifests():
    with pytest.raises(ManifestError, match="line 2"):
        parse_pip_manifest("numpy\n--weird-flag x\n")
    with pytest.raises(ManifestError):
        parse_conda_manifest("name: [unclosed\n")
    with pytest.raises(ManifestError):
        parse_conda_manifest("- just\n- a list\n")


def test_pip_parse_details():
    parsed = parse_pip_manifest("# c\nnumpy>=1.20  # note\ntorch[extra]==2.1; python_version>'3'\n"
                                "-f https://download.pytorch.org/whl/cu118\n")
    assert parsed.entries == [("numpy", ">=1.20"), ("torch", "==2.1")]
    assert gpu_hint(parsed)


def test_own_source_scan_matches_declared_dependencies():
    names = set(package_names(scan_imports(PACKAGE))[0])
    assert names == {"numpy", "torch", "torchvision", "PyYAML", "matplotlib"}


_names = st.lists(st.sampled_from(["numpy", "scipy", "torch", "torchvision", "yaml", "PIL", "requests"]),
                  unique=True, min_size=1)


@settings(max_examples=40, deadline=None)
@given(_names)
def test_scan_is_sound_and_complete(tmp_path_factory, names):
    root = tmp_path_factory.mktemp("gen")
    body = "".join(f"import {n}\n" if i % 2 else f"from {n} import x\n" for i, n in enumerate(names))
    write(root, {"pkg/mod.py": body, "pkg/__init__.py": "import os\n"})
    deps = scan_imports(root)
    assert deps.names == sorted(names)
    (root / "req.txt").write_text(emit_pip_manifest(deps))
    report = validate_manifest(root / "req.txt", root)
    assert (report.missing, report.extra) == ([], [])
