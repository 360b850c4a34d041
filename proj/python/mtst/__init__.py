"""Composed-image retrieval with synthetic triplets."""

import json as _json

from . import _mtst
from ._mtst import (
    UNCAPPED,
    ConfigError,
    ContractError,
    FormatError,
    IoError,
    MtstError,
    ParseError,
    label_pair_budget,
    load_checkpoint,
    load_gallery,
    mine_pairs,
    template_oracle,
    write_planted,
)

__all__ = [
    "UNCAPPED",
    "ConfigError",
    "ContractError",
    "FormatError",
    "IoError",
    "MtstError",
    "ParseError",
    "cli",
    "corpus_stats",
    "gradcheck",
    "label_pair_budget",
    "load_checkpoint",
    "load_gallery",
    "mine_pairs",
    "run_stage",
    "template_oracle",
    "write_planted",
]


def corpus_stats(triplets):
    return _json.loads(_mtst.corpus_stats(str(triplets)))


def gradcheck(seed=7, instances=100):
    return _json.loads(_mtst.gradcheck(seed, instances))


def run_stage(config, out, stage="pretrain", overrides=()):
    return _json.loads(_mtst.run_stage(str(config), str(out), stage, list(overrides)))


def cli(*args):
    return _mtst.cli([str(a) for a in args])
