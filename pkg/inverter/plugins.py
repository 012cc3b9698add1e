"""
Name-resolved plug-in factories.
Extractors, feature networks, attribute classifiers and landmark detectors are
declared in config by name and resolved here.
"""
import importlib
from typing import Callable, Dict

from inverter.errors import ConfigError

KINDS = ("extractor", "feature_network", "attribute_classifier", "landmark_detector")

_REGISTRY: Dict[str, Dict[str, Callable]] = {kind: {} for kind in KINDS}


def register_plugin(kind: str, name: str):
    """Decorator registering a factory under (kind, name)."""
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown plug-in kind {kind!r}")

    def decorator(factory: Callable) -> Callable:
        _REGISTRY[kind][name] = factory
        return factory

    return decorator


def resolve_plugin(kind: str, name: str) -> Callable:
    """
    Resolve a factory by registered name or "package.module:attribute" path.

    Args:
        kind: One of KINDS
        name: Registered name or import path

    Returns:
        Factory callable
    """
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown plug-in kind {kind!r}")
    if name in _REGISTRY[kind]:
        return _REGISTRY[kind][name]
    if ":" in name:
        module_name, _, attribute = name.partition(":")
        try:
            module = importlib.import_module(module_name)
            return getattr(module, attribute)
        except (ImportError, AttributeError) as e:
            raise ConfigError(f"cannot import {name!r}: {e}", kind)
    raise ConfigError(f"no {kind} plug-in named {name!r}", kind)


def available_plugins(kind: str) -> list:
    return sorted(_REGISTRY.get(kind, {}))
