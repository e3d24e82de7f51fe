"""Minimal pytree helpers for parameter containers.

A tree is a dataclass, tuple, list or dict whose leaves are numpy arrays or
autodiff nodes. Non-array dataclass fields (tags, floats) are carried along
from the first tree untouched.
"""

import dataclasses

import numpy as np

from volcast.autodiff import Node


def _is_leaf(x):
    return isinstance(x, (np.ndarray, Node))


def tree_map(fn, tree, *rest):
    if _is_leaf(tree):
        return fn(tree, *rest)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        changes = {}
        for f in dataclasses.fields(tree):
            v = getattr(tree, f.name)
            if _is_leaf(v) or _is_container(v):
                changes[f.name] = tree_map(fn, v, *(getattr(r, f.name) for r in rest))
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, (tuple, list)):
        out = [tree_map(fn, v, *(r[i] for r in rest)) for i, v in enumerate(tree)]
        return type(tree)(out)
    if isinstance(tree, dict):
        return {k: tree_map(fn, tree[k], *(r[k] for r in rest)) for k in sorted(tree)}
    raise TypeError(f"not a parameter tree: {type(tree).__name__}")


def _is_container(x):
    return (dataclasses.is_dataclass(x) and not isinstance(x, type)) or isinstance(x, (tuple, list, dict))


def tree_items(tree, prefix=""):
    """Yield ``(dotted_path, leaf)`` in a fixed traversal order."""
    if _is_leaf(tree):
        yield prefix, tree
        return
    if dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            v = getattr(tree, f.name)
            if _is_leaf(v) or _is_container(v):
                yield from tree_items(v, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, (tuple, list)):
        for i, v in enumerate(tree):
            yield from tree_items(v, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield from tree_items(tree[k], f"{prefix}.{k}" if prefix else str(k))


def tree_leaves(tree):
    return [leaf for _, leaf in tree_items(tree)]


def tree_unflatten(template, leaves):
    it = iter(leaves)
    out = tree_map(lambda _: next(it), template)
    if next(it, None) is not None:
        raise ValueError("too many leaves for template")
    return out
