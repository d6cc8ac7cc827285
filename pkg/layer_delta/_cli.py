#  Licensed under the Apache License, Version 2.0 (the "License"); you may
#  not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
# 	http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing,
#  software distributed under the License is distributed on an
#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
#  KIND, either express or implied.  See the License for the
#  specific language governing permissions and limitations
#  under the License.

"""Command-line interface: ``layer-delta <command> [options]``.

Logs go to stderr, machine-readable results are written to stdout as
one JSON document per line.
"""

import argparse
import logging
import sys
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from ._checkpoint import load, loads, read_header, save
from ._corpus import Corpus, load_corpus, unigram_perplexity
from ._delta import CompressedModel, SharingPlan, compress, storage_breakdown
from ._exceptions import ConfigError, LayerDeltaError
from ._models import DEFAULT, EvalResult, ModelConfig, QuantPolicy, ReplacementScheduler, TrainConfig
from ._pmr import compare_pmr, train
from ._quantizer import quantize_model
from ._redundancy import layer_similarity
from ._serializer import NdjsonSerializer
from ._training import train_teacher
from ._transformer import Model, count_params, evaluate_perplexity, init_model
from ._version import __version__
from .config_utils import load_json_config, merge_config, parse_plan_config, parse_rank

_logger = logging.getLogger("layer_delta.cli")
_ndjson = NdjsonSerializer()

CONFIG_SECTIONS = ("model", "plan", "quant", "scheduler", "train")

#: argparse dest -> TrainConfig field
_TRAIN_FLAGS = {
    "alpha": "alpha",
    "lr": "learning_rate",
    "lr_schedule": "lr_schedule",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seq_len": "seq_len",
    "seed": "seed",
    "mode": "mode",
    "lora_alpha": "lora_alpha",
    "lora_dropout": "lora_dropout",
    "adapter_rank": "adapter_rank",
    "max_tokens": "max_tokens",
}
#: argparse dest -> ReplacementScheduler field
_SCHEDULER_FLAGS = {
    "p0": "p0",
    "converge_step": "converge_step",
    "gamma": "depth_bias",
    "extra_epochs": "extra_epochs",
}
#: argparse dest -> ModelConfig field
_MODEL_FLAGS = {
    "n_layers": "n_layers",
    "d_model": "d_model",
    "n_heads": "n_heads",
    "d_ffn": "d_ffn",
    "max_seq_len": "max_seq_len",
}


def _emit(records: Iterable[Mapping[str, Any]]) -> None:
    sys.stdout.write(_ndjson.dumps(list(records)).decode("utf-8"))
    sys.stdout.flush()


def _flags(args: argparse.Namespace, mapping: Mapping[str, str]) -> Dict[str, Any]:
    return {field: getattr(args, dest) for dest, field in mapping.items() if hasattr(args, dest)}


def _config_file(args: argparse.Namespace) -> Dict[str, Any]:
    if getattr(args, "config", None) is None:
        return {}
    data = load_json_config(args.config)
    for key, value in data.items():
        if key not in CONFIG_SECTIONS:
            raise ConfigError(f"Unknown section in config file: '{key}'")
        if not isinstance(value, dict):
            raise ConfigError(f"Section '{key}' of the config file must be an object")
    return data


def _train_config(args: argparse.Namespace, file: Mapping[str, Any]) -> TrainConfig:
    return merge_config(TrainConfig(), file.get("train"), _flags(args, _TRAIN_FLAGS))


def _scheduler(args: argparse.Namespace, file: Mapping[str, Any], required: bool) -> Optional[ReplacementScheduler]:
    flags = _flags(args, _SCHEDULER_FLAGS)
    given = any(v is not DEFAULT for v in flags.values())
    if not (given or "scheduler" in file or required):
        return None
    return merge_config(ReplacementScheduler(), file.get("scheduler"), flags)


def _load_model(path: str) -> Model:
    obj = load(path)
    if not isinstance(obj, Model):
        raise ConfigError(f"Checkpoint '{path}' doesn't hold an uncompressed model")
    return obj


def _load_compressed(path: str) -> CompressedModel:
    obj = load(path)
    if not isinstance(obj, CompressedModel):
        raise ConfigError(f"Checkpoint '{path}' doesn't hold a compressed model")
    return obj


def _savings(original: int, stored: int) -> float:
    """Fraction of parameters saved; negative when the deltas outgrow their targets."""
    return (original - stored) / original


def _storage_bytes(obj: Any) -> int:
    if isinstance(obj, CompressedModel):
        return storage_breakdown(obj)["total_bytes"]
    return count_params(obj) * 4


def eval_result(obj: Any, corpus: Corpus, split: str, seq_len: Optional[int] = None) -> EvalResult:
    ppl, tokens = evaluate_perplexity(obj, corpus.split(split), seq_len=seq_len)
    original = count_params(obj.config)
    stored = obj.num_stored_params() if isinstance(obj, CompressedModel) else count_params(obj)
    return EvalResult(
        dataset=f"{corpus.corpus_id}:{split}",
        perplexity=ppl,
        tokens=tokens,
        storage_bytes=_storage_bytes(obj),
        params=stored,
        compression=_savings(original, stored),
    )


def _report_records(reports: Sequence[Any], extra: Sequence[Mapping[str, Any]] = ()) -> List[Dict[str, Any]]:
    records: List[Dict[str, Any]] = []
    for report in reports:
        records.extend(report.to_records())
    records.extend(dict(r) for r in extra)
    return records


def _write_report(path: Optional[str], records: Sequence[Mapping[str, Any]]) -> None:
    if path is None:
        return
    with open(path, "wb") as f:
        f.write(_ndjson.dumps(list(records)))


def cmd_train_teacher(args: argparse.Namespace) -> int:
    file = _config_file(args)
    config = merge_config(ModelConfig(), file.get("model"), _flags(args, _MODEL_FLAGS))
    if args.seed is not DEFAULT:
        config = config.replace(seed=args.seed)
    train_config = _train_config(args, file)
    corpus = load_corpus(args.corpus)
    teacher, report = train_teacher(init_model(config), corpus, train_config)
    save(teacher, args.out, dtype=args.dtype)
    result = eval_result(teacher, corpus, "val", seq_len=train_config.seq_len + 1)
    baseline = unigram_perplexity(corpus.train, corpus.val, config.vocab_size)
    _emit(
        _report_records(
            [report],
            [
                dict(type="eval", **result.to_dict()),
                {"type": "baseline", "unigram_val_perplexity": baseline},
            ],
        )
    )
    return 0


def cmd_compress(args: argparse.Namespace) -> int:
    teacher = _load_model(args.teacher)
    plan_data = load_json_config(args.plan)
    calibration = load_corpus(args.calib) if args.calib is not None else None

    importance = None
    if plan_data.get("strategy") == "similarity":
        if calibration is None:
            raise ConfigError("The 'similarity' strategy needs a calibration corpus (--calib)")
        importance = layer_similarity(
            teacher,
            calibration.train,
            plan_data.get("sublayer", "mlp"),
            corpus_id=calibration.corpus_id,
        )
    plan, plan_rank = parse_plan_config(plan_data, teacher.config, importance)
    rank = parse_rank(args.rank) if args.rank is not DEFAULT else plan_rank
    if rank is None:
        raise ConfigError("A rank is required: pass --rank or set 'rank' in the plan")

    compressed = compress(
        teacher,
        plan,
        rank,
        method=args.init,
        calibration=calibration.train if calibration is not None else None,
        seed=args.seed if args.seed is not DEFAULT else 0,
        lora_alpha=args.lora_alpha if args.lora_alpha is not DEFAULT else None,
    )
    save(compressed, args.out, dtype=args.dtype)
    before = count_params(teacher)
    after = compressed.num_stored_params()
    _emit(
        [
            dict(
                type="compression",
                strategy=plan.strategy,
                targets=len(plan),
                params_before=before,
                params_after=after,
                compression=_savings(before, after),
                delta_params=compressed.num_delta_params(),
                **storage_breakdown(compressed, args.dtype),
            )
        ]
    )
    return 0


def _tuning_inputs(args: argparse.Namespace) -> Tuple[Model, CompressedModel, Corpus, Dict[str, Any]]:
    return (
        _load_model(args.teacher),
        _load_compressed(args.student),
        load_corpus(args.corpus),
        _config_file(args),
    )


def cmd_delta_tune(args: argparse.Namespace) -> int:
    teacher, student, corpus, file = _tuning_inputs(args)
    train_config = _train_config(args, file)
    sched = _scheduler(args, file, required=False)
    plain = sched is None or sched.constant
    trained, report = train(
        teacher, student, corpus, train_config, sched, name="baseline" if plain else "pmr"
    )
    save(trained, args.out, dtype=args.dtype)
    records = _report_records([report])
    _write_report(args.report, records)
    _emit(records)
    return 0


def cmd_pmr_ablation(args: argparse.Namespace) -> int:
    teacher, student, corpus, file = _tuning_inputs(args)
    train_config = _train_config(args, file)
    sched = _scheduler(args, file, required=True)
    assert sched is not None
    result = compare_pmr(teacher, student, corpus, train_config, sched)
    records = _report_records([result["pmr"], result["baseline"]], [result["comparison"]])
    _write_report(args.report, records)
    _emit(records)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    obj = load(args.model)
    corpus = load_corpus(args.corpus)
    seq_len = args.seq_len if args.seq_len is not DEFAULT else None
    result = eval_result(obj, corpus, args.split, seq_len=seq_len)
    _emit([dict(type="eval", **result.to_dict())])
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    obj = load(args.model)
    if isinstance(obj, Model):
        obj = compress(obj, SharingPlan())
    file = _config_file(args)
    flags = {"bits": args.bits, "strategy": args.strategy, "granularity": args.granularity}
    policy = merge_config(QuantPolicy(), file.get("quant"), flags)
    quantized = quantize_model(obj, policy)
    save(quantized, args.out, dtype=args.dtype)
    _emit(
        [
            dict(
                type="quantize",
                bits=policy.bits,
                strategy=policy.strategy,
                granularity=policy.granularity,
                quantized_tensors=sorted(quantized.quantized),
                **storage_breakdown(quantized, args.dtype),
            )
        ]
    )
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    with open(args.model, "rb") as f:
        data = f.read()
    header, _ = read_header(data)
    obj = loads(data)
    records: List[Dict[str, Any]] = [
        {
            "type": "model",
            "kind": header["kind"],
            "config": obj.config.to_dict(),
            "params": count_params(obj),
        }
    ]
    if isinstance(obj, CompressedModel):
        for target, anchor in obj.plan:
            delta = obj.deltas[target]
            records.append(
                {
                    "type": "plan_entry",
                    "target": target.name,
                    "anchor": anchor.name,
                    "rank": delta.rank,
                    "scaling": delta.scaling,
                    "init_method": delta.init_method,
                }
            )
        records.append(dict(type="storage", **storage_breakdown(obj, header["float_dtype"])))
    for entry in header["tensors"]:
        records.append(
            {
                "type": "tensor",
                "name": entry["name"],
                "dtype": entry["dtype"],
                "shape": entry["shape"],
                "bytes": entry["length"],
            }
        )
    if args.corpus is not None:
        corpus = load_corpus(args.corpus)
        report = layer_similarity(obj, corpus.val, args.sublayer, corpus_id=corpus.corpus_id)
        records.extend(dict(type="similarity", **row) for row in report.to_rows())
        if args.similarity_out is not None:
            with open(args.similarity_out, "w", encoding="utf-8") as f:
                f.write(report.to_text())
    _emit(records)
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_output(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="Path of the checkpoint to write")
    parser.add_argument("--dtype", default="f32", choices=["f32", "f64"], help="Float storage type")


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--teacher", required=True)
    parser.add_argument("--student", required=True)
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--config", default=None, help="JSON file with 'train'/'scheduler' sections")
    parser.add_argument("--alpha", type=float, default=DEFAULT, help="Distillation weight")
    parser.add_argument("--p0", type=float, default=DEFAULT, help="Initial replacement probability")
    parser.add_argument("--converge-step", type=int, default=DEFAULT)
    parser.add_argument("--gamma", type=float, default=DEFAULT, help="Depth bias of replacement rates")
    parser.add_argument("--extra-epochs", type=int, default=DEFAULT)
    parser.add_argument("--epochs", type=int, default=DEFAULT)
    parser.add_argument("--lr", type=float, default=DEFAULT)
    parser.add_argument("--lr-schedule", choices=["constant", "cosine"], default=DEFAULT)
    parser.add_argument("--batch-size", type=int, default=DEFAULT)
    parser.add_argument("--seq-len", type=int, default=DEFAULT)
    parser.add_argument("--mode", choices=["delta_only", "joint"], default=DEFAULT)
    parser.add_argument("--lora-alpha", type=float, default=DEFAULT)
    parser.add_argument("--lora-dropout", type=float, default=DEFAULT)
    parser.add_argument("--adapter-rank", type=int, default=DEFAULT)
    parser.add_argument("--max-tokens", type=int, default=DEFAULT)
    parser.add_argument("--seed", type=int, default=DEFAULT)
    parser.add_argument("--report", default=None, help="Path of the NDJSON report to write")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layer-delta",
        description="Compress transformers with shared anchors and low-rank deltas",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train-teacher", help="Train a teacher model on a corpus")
    _add_common(p)
    p.add_argument("--config", default=None, help="JSON file with 'model'/'train' sections")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT)
    p.add_argument("--epochs", type=int, default=DEFAULT)
    p.add_argument("--lr", type=float, default=DEFAULT)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"], default=DEFAULT)
    p.add_argument("--batch-size", type=int, default=DEFAULT)
    p.add_argument("--seq-len", type=int, default=DEFAULT)
    p.add_argument("--max-tokens", type=int, default=DEFAULT)
    for dest in _MODEL_FLAGS:
        p.add_argument(f"--{dest.replace('_', '-')}", dest=dest, type=int, default=DEFAULT)
    _add_output(p)
    p.set_defaults(func=cmd_train_teacher)

    p = commands.add_parser("compress", help="Replace plan targets by low-rank deltas")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--plan", required=True, help="JSON plan config")
    p.add_argument("--rank", default=DEFAULT, help="Delta rank or 'full'")
    p.add_argument("--init", default="svd", choices=["gaussian", "svd", "qr", "eva"])
    p.add_argument("--calib", default=None, help="Calibration corpus for eva and similarity")
    p.add_argument("--lora-alpha", type=float, default=DEFAULT)
    p.add_argument("--seed", type=int, default=DEFAULT)
    _add_output(p)
    p.set_defaults(func=cmd_compress)

    p = commands.add_parser("delta-tune", help="Train deltas with progressive module replacement")
    _add_common(p)
    _add_training(p)
    _add_output(p)
    p.set_defaults(func=cmd_delta_tune)

    p = commands.add_parser("pmr-ablation", help="Compare PMR against plain distillation")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_pmr_ablation)

    p = commands.add_parser("eval", help="Perplexity of a model on a corpus split")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--seq-len", type=int, default=DEFAULT)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("quantize", help="Quantize the stored base weights")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None, help="JSON file with a 'quant' section")
    p.add_argument("--bits", type=int, choices=[4, 8], default=DEFAULT)
    p.add_argument("--strategy", choices=["AnchorSkip", "AllQuant"], default=DEFAULT)
    p.add_argument("--granularity", choices=["row", "tensor"], default=DEFAULT)
    _add_output(p)
    p.set_defaults(func=cmd_quantize)

    p = commands.add_parser("inspect", help="Show the plan, storage and redundancy of a model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--sublayer", default="both", choices=["attention", "mlp", "both"])
    p.add_argument("--similarity-out", default=None, help="Write the similarity table here")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        logging.Formatter(
            "[%(asctime)s] %(levelname)s %(name)s: %(message)s", datefmt="%Y-%m-%dT%H:%M:%S"
        )
    )
    logger = logging.getLogger("layer_delta")
    previous_level = logger.level
    logger.addHandler(handler)
    logger.setLevel(args.log_level)
    try:
        func: Callable[[argparse.Namespace], int] = args.func
        return func(args)
    except (LayerDeltaError, ValueError, OSError) as e:
        _logger.error("%s failed: %s", args.command, e)
        return 1
    finally:
        logger.removeHandler(handler)
        logger.setLevel(previous_level)
