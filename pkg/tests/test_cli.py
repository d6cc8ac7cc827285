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

import json

import numpy as np
import pytest

from layer_delta import CompressedModel, Model, load
from layer_delta import _cli
from layer_delta._cli import main

MODEL_FLAGS = [
    "--n-layers", "6",
    "--d-model", "16",
    "--n-heads", "2",
    "--d-ffn", "24",
    "--max-seq-len", "32",
]  # fmt: skip
TRAIN_FLAGS = ["--epochs", "1", "--batch-size", "4", "--seq-len", "16", "--lr", "0.003"]


def run(capsys, *argv):
    code = main([str(arg) for arg in argv])
    captured = capsys.readouterr()
    records = [json.loads(line) for line in captured.out.splitlines() if line]
    return code, records, captured.err


def write_json(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture
def teacher_path(tmp_path, corpus_path, capsys):
    path = tmp_path / "teacher.dllm"
    code, _, _ = run(
        capsys,
        "train-teacher",
        "--corpus", corpus_path,
        "--out", path,
        "--seed", "0",
        *MODEL_FLAGS,
        *TRAIN_FLAGS,
    )  # fmt: skip
    assert code == 0
    return path


@pytest.fixture
def plan_path(tmp_path):
    return write_json(
        tmp_path / "plan.json", {"strategy": "sequential", "sublayer": "mlp", "k": 2}
    )


@pytest.fixture
def student_path(tmp_path, teacher_path, plan_path, capsys):
    path = tmp_path / "student.dllm"
    code, _, _ = run(
        capsys,
        "compress",
        "--teacher", teacher_path,
        "--plan", plan_path,
        "--rank", "2",
        "--out", path,
    )  # fmt: skip
    assert code == 0
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert capsys.readouterr().out.startswith("layer-delta ")


def test_train_teacher(tmp_path, corpus_path, capsys):
    path = tmp_path / "teacher.dllm"
    code, records, err = run(
        capsys,
        "train-teacher",
        "--corpus", corpus_path,
        "--out", path,
        *MODEL_FLAGS,
        *TRAIN_FLAGS,
    )  # fmt: skip

    assert code == 0
    assert [r["type"] for r in records] == ["epoch", "summary", "eval", "baseline"]
    assert records[0]["epoch"] == 1
    assert records[2]["dataset"] == "corpus.txt:val"
    assert records[2]["compression"] == 0.0
    assert records[3]["unigram_val_perplexity"] > 1.0
    assert "Saved Model checkpoint to " in err

    teacher = load(path)
    assert isinstance(teacher, Model)
    assert teacher.config.n_layers == 6
    assert teacher.config.d_model == 16


def test_train_teacher_is_reproducible(tmp_path, teacher_path, corpus_path, capsys):
    again = tmp_path / "again.dllm"
    code, _, _ = run(
        capsys,
        "train-teacher",
        "--corpus", corpus_path,
        "--out", again,
        "--seed", "0",
        *MODEL_FLAGS,
        *TRAIN_FLAGS,
    )  # fmt: skip
    assert code == 0
    assert again.read_bytes() == teacher_path.read_bytes()


def test_compress(tmp_path, teacher_path, plan_path, capsys):
    path = tmp_path / "student.dllm"
    code, records, _ = run(
        capsys,
        "compress",
        "--teacher", teacher_path,
        "--plan", plan_path,
        "--rank", "2",
        "--init", "qr",
        "--out", path,
    )  # fmt: skip

    assert code == 0
    (record,) = records
    assert record["type"] == "compression"
    assert record["strategy"] == "sequential"
    assert record["targets"] == 6
    assert record["params_after"] < record["params_before"]
    assert record["delta_params"] == 6 * 2 * (24 + 16)
    assert record["compression"] == pytest.approx(
        (record["params_before"] - record["params_after"]) / record["params_before"]
    )
    assert record["total_bytes"] == record["base_bytes"] + record["delta_bytes"]

    student = load(path)
    assert isinstance(student, CompressedModel)
    assert {d.init_method for d in student.deltas.values()} == {"qr"}


def test_compress_takes_rank_from_plan(tmp_path, teacher_path, capsys):
    plan = write_json(tmp_path / "plan.json", {"k": 1, "sublayer": "both", "rank": 3})
    code, records, _ = run(
        capsys,
        "compress",
        "--teacher", teacher_path,
        "--plan", plan,
        "--out", tmp_path / "student.dllm",
    )  # fmt: skip

    assert code == 0
    assert records[0]["targets"] == 7
    assert {d.rank for d in load(tmp_path / "student.dllm").deltas.values()} == {3}


def test_compress_requires_a_rank(tmp_path, teacher_path, plan_path, capsys):
    code, records, err = run(
        capsys,
        "compress",
        "--teacher", teacher_path,
        "--plan", plan_path,
        "--out", tmp_path / "student.dllm",
    )  # fmt: skip

    assert code == 1
    assert records == []
    assert "compress failed: A rank is required: pass --rank or set 'rank' in the plan" in err
    assert not (tmp_path / "student.dllm").exists()


def test_similarity_plan_needs_calibration(tmp_path, teacher_path, corpus_path, capsys):
    plan = write_json(tmp_path / "plan.json", {"strategy": "similarity", "k": 2})
    argv = ["compress", "--teacher", teacher_path, "--plan", plan, "--rank", "2"]

    code, _, err = run(capsys, *argv, "--out", tmp_path / "a.dllm")
    assert code == 1
    assert "needs a calibration corpus (--calib)" in err

    code, records, _ = run(
        capsys, *argv, "--calib", corpus_path, "--out", tmp_path / "b.dllm"
    )
    assert code == 0
    assert records[0]["strategy"] == "similarity"
    assert records[0]["targets"] == 2 * 3


def test_compress_rejects_compressed_teacher(tmp_path, student_path, plan_path, capsys):
    code, _, err = run(
        capsys,
        "compress",
        "--teacher", student_path,
        "--plan", plan_path,
        "--rank", "2",
        "--out", tmp_path / "again.dllm",
    )  # fmt: skip
    assert code == 1
    assert "doesn't hold an uncompressed model" in err


def test_delta_tune(tmp_path, teacher_path, student_path, corpus_path, capsys):
    out = tmp_path / "tuned.dllm"
    report = tmp_path / "report.ndjson"
    code, records, _ = run(
        capsys,
        "delta-tune",
        "--teacher", teacher_path,
        "--student", student_path,
        "--corpus", corpus_path,
        "--p0", "0.5",
        "--converge-step", "10",
        "--out", out,
        "--report", report,
        *TRAIN_FLAGS,
    )  # fmt: skip

    assert code == 0
    assert [r["type"] for r in records] == ["epoch", "summary"]
    assert records[0]["run"] == "pmr"
    assert 0.5 <= records[0]["replacement_rate"] <= 1.0
    assert [json.loads(line) for line in report.read_text().splitlines()] == records

    before, after = load(student_path), load(out)
    assert any(
        not np.array_equal(after.deltas[site].A.data, delta.A.data)
        for site, delta in before.deltas.items()
    )
    for name, tensor in before.params.items():
        np.testing.assert_array_equal(after.params[name].data, tensor.data)


def test_delta_tune_config_file(tmp_path, teacher_path, student_path, corpus_path, capsys):
    config = write_json(
        tmp_path / "config.json",
        {"train": {"epochs": 3, "batch_size": 4, "seq_len": 16}, "scheduler": {"p0": 1.0}},
    )
    code, records, _ = run(
        capsys,
        "delta-tune",
        "--teacher", teacher_path,
        "--student", student_path,
        "--corpus", corpus_path,
        "--config", config,
        "--epochs", "1",
        "--out", tmp_path / "tuned.dllm",
    )  # fmt: skip

    assert code == 0
    # The flag wins over the file, the file over the defaults
    assert [r["type"] for r in records] == ["epoch", "summary"]
    assert records[0]["run"] == "baseline"
    assert records[0]["replacement_rate"] == 1.0


def test_delta_tune_without_scheduler_is_baseline(
    tmp_path, teacher_path, student_path, corpus_path, capsys
):
    code, records, _ = run(
        capsys,
        "delta-tune",
        "--teacher", teacher_path,
        "--student", student_path,
        "--corpus", corpus_path,
        "--out", tmp_path / "tuned.dllm",
        *TRAIN_FLAGS,
    )  # fmt: skip
    assert code == 0
    assert records[-1]["run"] == "baseline"


def test_delta_tune_zero_epochs_keeps_checkpoint(
    tmp_path, teacher_path, student_path, corpus_path, capsys
):
    out = tmp_path / "tuned.dllm"
    code, records, _ = run(
        capsys,
        "delta-tune",
        "--teacher", teacher_path,
        "--student", student_path,
        "--corpus", corpus_path,
        "--out", out,
        "--epochs", "0",
    )  # fmt: skip
    assert code == 0
    assert records[-1]["epochs"] == 0
    assert out.read_bytes() == student_path.read_bytes()


def without_timing(records):
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in records]


def test_delta_tune_with_constant_schedule_matches_baseline(
    tmp_path, teacher_path, student_path, corpus_path, capsys, caplog
):
    outputs = []
    for extra in ([], ["--p0", "1", "--converge-step", "100000"]):
        out = tmp_path / f"tuned{len(extra)}.dllm"
        code, records, _ = run(
            capsys,
            "delta-tune",
            "--teacher", teacher_path,
            "--student", student_path,
            "--corpus", corpus_path,
            "--out", out,
            *TRAIN_FLAGS,
            *extra,
        )  # fmt: skip
        assert code == 0
        outputs.append((without_timing(records), out.read_bytes()))

    (plain, plain_bytes), (constant, constant_bytes) = outputs
    assert constant == plain
    assert constant_bytes == plain_bytes
    assert "didn't reach 1.0" not in caplog.text


def test_unknown_config_section(tmp_path, teacher_path, student_path, corpus_path, capsys):
    config = write_json(tmp_path / "config.json", {"training": {"epochs": 1}})
    code, _, err = run(
        capsys,
        "delta-tune",
        "--teacher", teacher_path,
        "--student", student_path,
        "--corpus", corpus_path,
        "--config", config,
        "--out", tmp_path / "tuned.dllm",
    )  # fmt: skip
    assert code == 1
    assert "Unknown section in config file: 'training'" in err


def test_pmr_ablation(tmp_path, teacher_path, student_path, corpus_path, capsys):
    report = tmp_path / "ablation.ndjson"
    code, records, _ = run(
        capsys,
        "pmr-ablation",
        "--teacher", teacher_path,
        "--student", student_path,
        "--corpus", corpus_path,
        "--p0", "0.3",
        "--converge-step", "20",
        "--gamma", "0.5",
        "--report", report,
        *TRAIN_FLAGS,
    )  # fmt: skip

    assert code == 0
    assert [(r["type"], r.get("run")) for r in records] == [
        ("epoch", "pmr"),
        ("summary", "pmr"),
        ("epoch", "baseline"),
        ("summary", "baseline"),
        ("comparison", None),
    ]
    comparison = records[-1]
    assert comparison["pmr_final_val_perplexity"] == records[1]["final_val_perplexity"]
    assert comparison["baseline_epochs_to_threshold"] == 1
    assert len(report.read_text().splitlines()) == 5


def test_eval(teacher_path, student_path, corpus_path, capsys):
    code, records, _ = run(
        capsys, "eval", "--model", student_path, "--corpus", corpus_path, "--split", "test"
    )
    assert code == 0
    (record,) = records
    assert record["type"] == "eval"
    assert record["dataset"] == "corpus.txt:test"
    assert record["perplexity"] > 1.0
    assert 0.0 < record["compression"] < 1.0

    code, records, _ = run(capsys, "eval", "--model", teacher_path, "--corpus", corpus_path)
    assert records[0]["dataset"] == "corpus.txt:val"
    assert records[0]["compression"] == 0.0


def test_quantize_and_inspect(tmp_path, student_path, capsys):
    out = tmp_path / "quantized.dllm"
    code, records, _ = run(
        capsys,
        "quantize",
        "--model", student_path,
        "--bits", "4",
        "--strategy", "AnchorSkip",
        "--out", out,
    )  # fmt: skip

    assert code == 0
    (record,) = records
    assert record["type"] == "quantize"
    assert record["bits"] == 4
    assert len(record["quantized_tensors"]) == 42 - 6 - 3
    assert record["quantized_bytes"] > 0

    code, records, _ = run(capsys, "inspect", "--model", out)
    assert code == 0
    assert records[0]["type"] == "model"
    assert records[0]["kind"] == "compressed"
    entries = [r for r in records if r["type"] == "plan_entry"]
    assert len(entries) == 6
    assert {e["anchor"] for e in entries} == {
        "blocks.1.mlp.gate",
        "blocks.1.mlp.up",
        "blocks.1.mlp.down",
    }
    dtypes = {r["name"]: r["dtype"] for r in records if r["type"] == "tensor"}
    assert dtypes["blocks.1.mlp.up"] == "f32"
    assert dtypes["blocks.1.attention.q"] == "u4p"
    assert dtypes["blocks.1.attention.q.scales"] == "f32"
    assert dtypes["embed"] == "f32"
    assert dtypes["deltas.blocks.2.mlp.up.A"] == "f32"


def test_quantize_plain_model_with_config(tmp_path, teacher_path, capsys):
    config = write_json(tmp_path / "quant.json", {"quant": {"bits": 4, "granularity": "tensor"}})
    code, records, _ = run(
        capsys,
        "quantize",
        "--model", teacher_path,
        "--config", config,
        "--bits", "8",
        "--out", tmp_path / "quantized.dllm",
    )  # fmt: skip

    assert code == 0
    assert records[0]["bits"] == 8
    assert records[0]["granularity"] == "tensor"
    assert records[0]["strategy"] == "AllQuant"
    assert len(records[0]["quantized_tensors"]) == 42 + 2


def test_inspect_similarity(tmp_path, teacher_path, corpus_path, capsys):
    table = tmp_path / "similarity.tsv"
    code, records, _ = run(
        capsys,
        "inspect",
        "--model", teacher_path,
        "--corpus", corpus_path,
        "--sublayer", "mlp",
        "--similarity-out", table,
    )  # fmt: skip

    assert code == 0
    rows = [r for r in records if r["type"] == "similarity"]
    assert [r["site"] for r in rows] == [f"blocks.{b}.mlp" for b in range(6)]
    assert all(abs(r["score"]) <= 1.0 + 1e-9 for r in rows)
    lines = table.read_text().splitlines()
    assert lines[0] == "site\tscore\tn"
    assert len(lines) == 7


def test_missing_checkpoint(tmp_path, corpus_path, capsys):
    code, records, err = run(
        capsys, "eval", "--model", tmp_path / "missing.dllm", "--corpus", corpus_path
    )
    assert code == 1
    assert records == []
    assert "eval failed: Couldn't read checkpoint " in err


def test_log_level(tmp_path, teacher_path, corpus_path, capsys):
    code, _, err = run(
        capsys,
        "eval",
        "--model", teacher_path,
        "--corpus", corpus_path,
        "--log-level", "ERROR",
    )  # fmt: skip
    assert code == 0
    assert err == ""


def test_quantize_wraps_plain_model_in_empty_plan(tmp_path, teacher_path, capsys, mocker):
    spy = mocker.spy(_cli, "compress")
    code, _, _ = run(
        capsys,
        "quantize",
        "--model", teacher_path,
        "--out", tmp_path / "quantized.dllm",
    )  # fmt: skip

    assert code == 0
    (call,) = spy.call_args_list
    assert len(call.args[1]) == 0
    assert isinstance(load(tmp_path / "quantized.dllm"), CompressedModel)
