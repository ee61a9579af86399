"""Sparse autoencoders over embeddings: training, metrics and concept tools."""

import json as _json

from ._msae import (
    Model,
    cknna,
    cosine_fidelity,
    decoder_orthogonality,
    fvu,
    l0_sparsity,
    load_embeddings,
    match_concepts,
    save_embeddings,
    synthesize,
    train,
)
from ._msae import run_cli as _run_cli

__all__ = [
    "Model",
    "cknna",
    "cosine_fidelity",
    "decoder_orthogonality",
    "fvu",
    "l0_sparsity",
    "load_embeddings",
    "match_concepts",
    "run_cli",
    "save_embeddings",
    "synthesize",
    "train",
]


def run_cli(args):
    """Run an `msae` subcommand in-process. Returns (exit_code, stdout, stderr)."""
    return _run_cli([str(a) for a in args])


def run_cli_json(args):
    """Run a subcommand and parse its JSON result; raises RuntimeError on a non-zero exit."""
    code, out, err = run_cli(args)
    if code != 0:
        raise RuntimeError(f"msae {args[0]} exited with {code}: {err.strip()}")
    return _json.loads(out)
