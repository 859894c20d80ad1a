"""Basic tests to verify the development environment."""

import importlib.util
import sys


def test_python_version():
    """tomllib needs Python 3.11; the project targets 3.12."""
    assert sys.version_info >= (3, 11), "Python version should be at least 3.11"


def test_core_dependencies():
    """Test that core dependencies can be imported."""
    core_packages = [
        "numpy",
        "scipy",
        "numba",
        "pandas",
        "pydantic",
        "typer",
        "rich",
        "tabulate",
        "tqdm",
    ]

    for package in core_packages:
        assert (
            importlib.util.find_spec(package) is not None
        ), f"{package} should be installed"


def test_entry_point():
    """The CLI module exposes the typer app."""
    import src.main

    assert hasattr(src.main, "app"), "src.main should define the typer app"
