"""
Utility module for reporting the numerical stack a run was produced with.
"""

import importlib.metadata
import importlib.util
import logging
import os
from typing import Dict, Optional, TypedDict


class DependencyInfo(TypedDict):
    available: bool
    path: Optional[str]
    version: Optional[str]


logger: logging.Logger = logging.getLogger(__name__)

# Packages whose versions can change numerical results
NUMERICAL_PACKAGES = ["numpy", "scipy", "numba", "pandas"]


class DependencyManager:
    """
    Looks up installed packages and the numba JIT state.
    """

    @staticmethod
    def check_package(name: str) -> DependencyInfo:
        """
        Check whether a package is importable and which version is installed.

        Returns:
            Dict containing:
                - available (bool): Whether the package can be imported
                - path (str): Location of the package if found
                - version (str): Installed distribution version if known
        """
        result: DependencyInfo = {"available": False, "path": None, "version": None}

        spec = importlib.util.find_spec(name)
        if spec is None:
            logger.warning(f"{name} package not installed")
            return result

        result["available"] = True
        result["path"] = getattr(spec, "origin", None)
        try:
            result["version"] = importlib.metadata.version(name)
        except importlib.metadata.PackageNotFoundError:
            logger.debug(f"No distribution metadata for {name}")
        return result

    @staticmethod
    def numba_jit_enabled() -> bool:
        """False when NUMBA_DISABLE_JIT is set; the oracle then runs in pure Python."""
        return os.environ.get("NUMBA_DISABLE_JIT", "0") in ("", "0")

    @staticmethod
    def environment_report() -> Dict[str, DependencyInfo]:
        return {name: DependencyManager.check_package(name) for name in NUMERICAL_PACKAGES}

    @staticmethod
    def log_environment() -> None:
        """Record package versions and JIT state in the run log."""
        for name, info in DependencyManager.environment_report().items():
            logger.info(f"{name}: {info['version'] if info['available'] else 'missing'}")
        if not DependencyManager.numba_jit_enabled():
            logger.warning("numba JIT disabled; oracle simulations will be slow")
