"""HTTP request anomaly detection: tokenizer, CNN classifier, wire protocol and log store."""

from ._reqsentry import *  # noqa: F401,F403
from ._reqsentry import (
    Error,
    FrameKind,
    LogStore,
    Model,
    ModelServer,
    Service,
    Vocabulary,
    chunk,
    compile_filter,
    decode,
    encode,
    flatten,
    infer_remote,
    parse_log,
    reassemble,
    synth_corpus,
    train_bbpe,
    train_model,
)

__all__ = [
    "Error",
    "FrameKind",
    "LogStore",
    "Model",
    "ModelServer",
    "Service",
    "Vocabulary",
    "chunk",
    "compile_filter",
    "decode",
    "encode",
    "flatten",
    "infer_remote",
    "parse_log",
    "reassemble",
    "synth_corpus",
    "train_bbpe",
    "train_model",
]
