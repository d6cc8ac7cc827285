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

import numpy as np
import pytest

from layer_delta import (
    AlternatingStrategy,
    ConfigError,
    ImportanceReport,
    PlanError,
    PlanStrategy,
    build_plan,
    layer_similarity,
)


def scores(config, values):
    """Importance report with every unit at 0 except the given ones."""
    table = {(b, s): 0.0 for b in range(config.n_layers) for s in ("attention", "mlp")}
    table.update(values)
    return ImportanceReport(scores=table, sample_size=10, corpus_id="synthetic")


def target_blocks(plan):
    return sorted({t.block for t in plan.targets})


def test_similarity_report_covers_requested_sublayers(tiny_model, corpus):
    report = layer_similarity(tiny_model, corpus.val, "both", corpus_id="c")
    assert set(report.scores) == {(b, s) for b in range(6) for s in ("attention", "mlp")}
    assert all(-1.0 <= v <= 1.0 for v in report.scores.values())
    assert report.sample_size == 256
    assert report.corpus_id == "c"

    mlp_only = layer_similarity(tiny_model, corpus.val, "mlp")
    assert set(mlp_only.scores) == {(b, "mlp") for b in range(6)}
    assert mlp_only.scores[(3, "mlp")] == pytest.approx(report.scores[(3, "mlp")])


def test_identity_sublayer_is_most_redundant(tiny_model, corpus):
    model = tiny_model.copy()
    model.params["blocks.3.mlp.down"].data[:] = 0.0
    report = layer_similarity(model, corpus.val[:64])
    assert report.scores[(3, "mlp")] == pytest.approx(1.0)
    assert report.ranked()[0] == ((3, "mlp"), pytest.approx(1.0))


def test_similarity_needs_tokens(tiny_model):
    with pytest.raises(ValueError) as e:
        layer_similarity(tiny_model, np.array([], dtype=int))
    assert str(e.value) == "Corpus sample is empty"


def test_similarity_respects_max_positions(tiny_model, corpus):
    report = layer_similarity(tiny_model, corpus.train, max_positions=40)
    assert report.sample_size == 32


def test_report_rows_and_text():
    report = ImportanceReport(scores={(1, "mlp"): 0.5, (0, "attention"): 0.25}, sample_size=7)
    assert report.to_rows() == [
        {"site": "blocks.0.attention", "score": 0.25, "n": 7},
        {"site": "blocks.1.mlp", "score": 0.5, "n": 7},
    ]
    assert report.to_text() == (
        "site\tscore\tn\nblocks.0.attention\t0.250000\t7\nblocks.1.mlp\t0.500000\t7\n"
    )
    with pytest.raises(ValueError):
        ImportanceReport(scores={(0, "mlp"): float("nan")}, sample_size=1)


def test_ranking_breaks_ties_by_depth():
    report = ImportanceReport(
        scores={(2, "mlp"): 0.5, (1, "mlp"): 0.5, (1, "attention"): 0.5, (0, "mlp"): 0.9},
        sample_size=1,
    )
    assert [unit for unit, _ in report.ranked()] == [
        (0, "mlp"),
        (1, "attention"),
        (1, "mlp"),
        (2, "mlp"),
    ]


def test_sequential_plan_shares_one_anchor(tiny_config):
    plan = build_plan(tiny_config, "sequential", "attention", k=2)
    assert target_blocks(plan) == [2, 3]
    assert {a.block for a in plan.anchors} == {1}
    assert {t.role for t in plan.targets} == {"q", "k", "v", "o"}


def test_sequential_plan_without_protection(tiny_config):
    plan = build_plan(tiny_config, "sequential", "both", k=3, protected_blocks=[0])
    assert target_blocks(plan) == [3, 4, 5]
    assert {a.block for a in plan.anchors} == {2}
    assert len(plan) == 3 * 7


def test_alternating_plan(tiny_config):
    plan = build_plan(tiny_config, "alternating", "mlp", k=1)
    assert [(t.block, plan.anchor_of(t).block) for t in plan.targets] == [(3, 2)] * 3

    plan = build_plan(tiny_config, AlternatingStrategy(), "mlp", k=2, protected_blocks=[0])
    assert [(t.block, plan.anchor_of(t).block) for t in plan.targets[::3]] == [(3, 2), (5, 4)]


@pytest.mark.parametrize(
    ["strategy", "k", "message"],
    [
        ("sequential", 3, "k=3 is too large: no 4 consecutive eligible blocks"),
        ("alternating", 2, "k=2 is too large: no 4 consecutive eligible blocks"),
    ],
)
def test_plan_too_large(tiny_config, strategy, k, message):
    with pytest.raises(PlanError) as e:
        build_plan(tiny_config, strategy, "mlp", k=k)
    assert str(e.value) == message


def test_similarity_plan_picks_most_redundant(tiny_config):
    report = scores(tiny_config, {(3, "mlp"): 0.9, (2, "mlp"): 0.1, (2, "attention"): 0.95})
    plan = build_plan(tiny_config, "similarity", "mlp", k=1, importance=report)
    assert plan.strategy == "similarity"
    assert [(t.block, plan.anchor_of(t).block) for t in plan.targets] == [(3, 2)] * 3

    plan = build_plan(tiny_config, "similarity", "both", k=2, importance=report)
    assert sorted({t.unit for t in plan.targets}) == [(2, "attention"), (3, "mlp")]
    assert {t.unit: plan.anchor_of(t).block for t in plan.targets} == {
        (2, "attention"): 1,
        (3, "mlp"): 2,
    }


def test_similarity_plan_anchors_skip_chosen_blocks(tiny_config):
    report = scores(tiny_config, {(3, "mlp"): 0.9, (2, "mlp"): 0.8})
    plan = build_plan(tiny_config, "similarity", "mlp", k=2, importance=report)
    assert {t.block: plan.anchor_of(t).block for t in plan.targets} == {2: 1, 3: 1}


def test_similarity_plan_errors(tiny_config):
    with pytest.raises(PlanError) as e:
        build_plan(tiny_config, "similarity", "mlp", k=1)
    assert str(e.value) == "The 'similarity' strategy requires an importance report"

    with pytest.raises(PlanError):
        build_plan(tiny_config, "similarity", "mlp", k=3, importance=scores(tiny_config, {}))

    partial = ImportanceReport(scores={(2, "mlp"): 1.0}, sample_size=1)
    with pytest.raises(PlanError):
        build_plan(tiny_config, "similarity", "mlp", k=1, importance=partial)


def test_empty_plan(tiny_config):
    plan = build_plan(tiny_config, "alternating", "mlp", k=0)
    assert len(plan) == 0
    assert plan.strategy == "alternating"
    assert plan.protected_blocks == {0, 4, 5}


def test_build_plan_option_errors(tiny_config):
    with pytest.raises(PlanError) as e:
        build_plan(tiny_config, "random", "mlp", k=1)
    assert str(e.value) == (
        "Unknown option for strategy: 'random'. "
        "Available options are: 'alternating', 'sequential', 'similarity'"
    )
    with pytest.raises(ConfigError):
        build_plan(tiny_config, "sequential", "ffn", k=1)
    with pytest.raises(PlanError):
        build_plan(tiny_config, "sequential", "mlp", k=-1)


def test_custom_strategy_is_tagged_explicit(tiny_config):
    class LastBlock(PlanStrategy):
        name = "last"

        def place(self, config, sublayers, k, eligible, importance):
            return [((eligible[-1], sub), eligible[-2]) for sub in sublayers]

    plan = build_plan(tiny_config, LastBlock(), "mlp", k=1)
    assert plan.strategy == "explicit"
    assert target_blocks(plan) == [3]
