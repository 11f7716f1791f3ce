import copy
import os

import numpy as np
import pytest

from errors import ConfigError, ErrorCode, NormError
from experiment.config import MethodSpec, config_from_dict, load_config
from experiment.runner import build_contexts, label_mask, run_experiment, split_dataset
from model.mlp import NormKind
from reporting.csv_writer import CONTEXT_FILE, FINALS_FILE, ROWS_FILE, SUMMARY_FILE, read_report
from reporting.report_builder import (EpochRow, FinalRow, MetricsReport, check_consistency,
                                      compare_table, macro_metrics)
from synthetic_data.generators import Dataset, generate

BASE_CONFIG = {
    "name": "tiny",
    "dataset": {"generator": "mixture_classification",
                "params": {"k": 2, "classes": 2, "n_per_context": 40, "dim": 4,
                           "context_shift": 8.0, "class_margin": 3.0, "seed": 0}},
    "contexts": {"source": "labels"},
    "methods": ["bn"],
    "model": {"hidden": [8]},
    "training": {"epochs": 1, "batch_size": 16, "lr": 0.01, "seeds": [0]},
}


def make_config(**overrides):
    payload = copy.deepcopy(BASE_CONFIG)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(payload.get(key), dict):
            payload[key].update(value)
        else:
            payload[key] = value
    return config_from_dict(payload)


class TestConfig:
    @pytest.mark.parametrize("overrides,field", [
        ({"methods": ["bn", "gn"]}, "methods"),
        ({"methods": ["ln-2"]}, "methods"),
        ({"methods": []}, "methods"),
        ({"training": {"epochs": 0}}, "training.epochs"),
        ({"training": {"lr": -1.0}}, "training.lr"),
        ({"training": {"seeds": [1, 1]}}, "training.seeds"),
        ({"contexts": {"source": "kmeans"}}, "contexts.k"),
        ({"contexts": {"source": "oracle"}}, "contexts.source"),
        ({"model": {"hidden": [6], "spatial": 4}}, "model.hidden"),
        ({"evaluation": {"eval_fraction": 1.5}}, "evaluation.eval_fraction"),
        ({"training": {"momentum": 0.9}}, "training.momentum"),
        ({"bogus": 1}, "bogus"),
        ({"workers": 0}, "workers"),
        ({"contexts": {"n_init": 0}}, "contexts.n_init"),
        ({"methods": ["bn", "in"]}, "model.spatial"),
        ({"methods": ["in"], "model": {"hidden": [8], "spatial": 1}}, "model.spatial"),
        ({"training": {"unlabeled_contexts": [1, 1]}}, "training.unlabeled_contexts"),
    ])
    def test_invalid_fields_are_named(self, overrides, field):
        with pytest.raises(ConfigError) as info:
            make_config(**overrides)
        assert info.value.field == field
        assert info.value.code is ErrorCode.BAD_CONFIG

    def test_dataset_source_required(self):
        with pytest.raises(ConfigError) as info:
            make_config(dataset={"generator": None, "params": {}})
        assert info.value.field == "dataset"

    def test_method_names(self):
        assert MethodSpec.parse("sbn-8") == MethodSpec(name="sbn-8", kind=NormKind.SBN, k=8)
        assert MethodSpec.parse("ln").kind is NormKind.LN
        assert MethodSpec.parse("mn-3").k == 3

    def test_load_config_reports_position(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"name": "x",\n  "methods": [}')
        with pytest.raises(ConfigError) as info:
            load_config(str(path))
        assert "line 2" in info.value.message

    def test_bundled_configs_load(self):
        root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
        for name in ("mixture_k4.json", "sbn_k_sweep.json", "domain_shift.json"):
            config = load_config(os.path.join(root, name))
            assert config.method_specs()


class TestSplitAndContexts:
    def test_split_is_stratified_partition(self):
        config = make_config()
        dataset = generate(config.dataset.generator, config.dataset.params)
        split = split_dataset(config, dataset, seed=3)
        assert np.intersect1d(split.train, split.eval).size == 0
        np.testing.assert_array_equal(np.union1d(split.train, split.eval), np.arange(dataset.n))
        assert np.all(np.diff(split.eval) > 0)
        assert split.eval.shape[0] == 16
        np.testing.assert_array_equal(np.bincount(dataset.class_labels[split.eval]), [8, 8])

    def test_focus_context_must_exist(self):
        config = make_config(evaluation={"focus_context": 5})
        dataset = generate(config.dataset.generator, config.dataset.params)
        with pytest.raises(ConfigError) as info:
            split_dataset(config, dataset, seed=0)
        assert info.value.field == "evaluation.focus_context"

    def test_label_contexts_use_train_proportions(self):
        config = make_config(methods=["sbn"])
        dataset = generate(config.dataset.generator, config.dataset.params)
        split = split_dataset(config, dataset, seed=0)
        train, held_out = build_contexts(config, dataset, split)
        assert train.k == 2
        np.testing.assert_allclose(train.lam, np.bincount(dataset.context_labels[split.train]) / 64)
        np.testing.assert_array_equal(held_out.lam, train.lam)
        np.testing.assert_array_equal(held_out.indices, dataset.context_labels[split.eval])

    def test_method_k_switches_to_kmeans(self):
        config = make_config(methods=["sbn-3"])
        dataset = generate(config.dataset.generator, config.dataset.params)
        split = split_dataset(config, dataset, seed=0)
        train, held_out = build_contexts(config, dataset, split, k=3)
        assert train.k == 3 and held_out.k == 3
        assert abs(train.lam.sum() - 1.0) <= 1e-9

    def test_ground_truth_needs_true_k(self):
        config = make_config(methods=["sbn"], contexts={"source": "ground_truth", "k": 3})
        dataset = generate(config.dataset.generator, config.dataset.params)
        with pytest.raises(ConfigError) as info:
            build_contexts(config, dataset, split_dataset(config, dataset, seed=0))
        assert info.value.field == "contexts.k"

    def test_label_mask_hides_listed_contexts(self):
        config = make_config(training={"unlabeled_contexts": [1]})
        dataset = generate(config.dataset.generator, config.dataset.params)
        split = split_dataset(config, dataset, seed=0)
        mask = label_mask(config, dataset, split)
        np.testing.assert_array_equal(mask, dataset.context_labels[split.train] == 0)
        assert label_mask(make_config(), dataset, split).all()

    def test_label_mask_errors(self):
        config = make_config(training={"unlabeled_contexts": [0, 1]})
        dataset = generate(config.dataset.generator, config.dataset.params)
        with pytest.raises(ConfigError) as info:
            label_mask(config, dataset, split_dataset(config, dataset, seed=0))
        assert info.value.field == "training.unlabeled_contexts"
        plain = Dataset(features=dataset.features, class_labels=dataset.class_labels)
        config = make_config(training={"unlabeled_contexts": [1]})
        with pytest.raises(ConfigError) as info:
            label_mask(config, plain, split_dataset(config, plain, seed=0))
        assert info.value.field == "training.unlabeled_contexts"


class TestRunExperiment:
    def test_single_run_layout(self, tmp_path):
        report = run_experiment(make_config(), str(tmp_path))
        assert len(report.rows) == 1 and len(report.finals) == 1
        for name in (ROWS_FILE, FINALS_FILE, CONTEXT_FILE, SUMMARY_FILE, "timing.json",
                     "config.json"):
            assert (tmp_path / name).is_file()
        lines = (tmp_path / ROWS_FILE).read_text().splitlines()
        assert lines[0] == "method,seed,epoch,train_loss,train_acc,eval_acc"
        assert len(lines) == 2
        summary = (tmp_path / SUMMARY_FILE).read_text().splitlines()
        assert summary[0] == "method,acc_mean,acc_std,prec,rec,f1,wall_s"
        assert summary[1].endswith(",0.000")

    def test_all_methods(self, tmp_path):
        config = make_config(methods=["bn", "ln", "in", "mn", "sbn", "sbn-3"],
                             model={"hidden": [8], "spatial": 2},
                             training={"epochs": 2, "seeds": [0, 1]})
        report = run_experiment(config, str(tmp_path))
        assert len(report.rows) == 6 * 2 * 2
        assert report.methods == ["bn", "ln", "in", "mn", "sbn", "sbn-3"]
        assert check_consistency(report) == []
        for final in report.finals:
            assert 0.0 <= final.acc <= 1.0 and 0.0 <= final.f1 <= 1.0
        contexts = {(row.method, row.seed, row.context) for row in report.context_rows}
        assert ("sbn", 1, 1) in contexts

    def test_summary_is_deterministic(self, tmp_path):
        config = make_config(methods=["bn", "sbn"], training={"epochs": 2})
        run_experiment(config, str(tmp_path / "first"))
        run_experiment(config, str(tmp_path / "second"))
        for name in (SUMMARY_FILE, ROWS_FILE, FINALS_FILE):
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()

    def test_read_report_round_trip(self, tmp_path):
        report = run_experiment(make_config(methods=["bn", "sbn"]), str(tmp_path))
        restored = read_report(str(tmp_path))
        assert restored.rows == report.rows
        assert restored.finals == report.finals
        assert restored.context_rows == report.context_rows
        assert compare_table(restored)[1] == (tmp_path / SUMMARY_FILE).read_text()

    def test_unknown_contexts_at_eval(self):
        config = make_config(methods=["sbn"], evaluation={"contexts_known": False})
        report = run_experiment(config)
        assert len(report.finals) == 1

    def test_workers_keep_order_and_values(self):
        config = make_config(methods=["bn", "sbn"], training={"seeds": [0, 1]})
        serial = run_experiment(config)
        parallel = run_experiment(make_config(methods=["bn", "sbn"], training={"seeds": [0, 1]},
                                              workers=2))
        assert parallel.rows == serial.rows
        assert parallel.finals == serial.finals

    def test_unlabeled_context_still_trains(self):
        config = make_config(methods=["bn", "sbn"], evaluation={"focus_context": 1},
                             training={"epochs": 2, "unlabeled_contexts": [1]})
        report = run_experiment(config)
        assert len(report.rows) == 4
        for row in report.rows:
            assert np.isfinite(row.train_loss) and 0.0 <= row.train_acc <= 1.0


@pytest.mark.parametrize("method", ["bn", "ln", "in", "mn", "sbn"])
def test_training_loss_decreases(method):
    config = make_config(
        dataset={"params": {"k": 2, "classes": 2, "n_per_context": 100, "dim": 8,
                            "context_shift": 10.0, "class_margin": 4.0, "seed": 0}},
        methods=[method],
        model={"hidden": [16], "spatial": 4},
        training={"epochs": 20, "batch_size": 64, "lr": 1e-3},
    )
    report = run_experiment(config)
    losses = [row.train_loss for row in sorted(report.rows, key=lambda row: row.epoch)]
    assert len(losses) == 20
    slack = 0.05 * (max(losses) - min(losses))
    for before, after in zip(losses, losses[1:]):
        assert after <= before + slack
    assert losses[-1] < losses[0]


class TestReporting:
    def test_macro_metrics_by_hand(self):
        metrics = macro_metrics([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0])
        assert metrics["acc"] == pytest.approx(4 / 6)
        assert metrics["prec"] == pytest.approx((0.5 + 2 / 3 + 1.0) / 3)
        assert metrics["rec"] == pytest.approx((0.5 + 1.0 + 0.5) / 3)
        assert metrics["f1"] == pytest.approx((0.5 + 0.8 + 2 / 3) / 3)

    def test_macro_metrics_empty(self):
        with pytest.raises(NormError) as info:
            macro_metrics([], [])
        assert info.value.code is ErrorCode.EMPTY_SELECTION

    def test_single_seed_has_zero_std(self):
        report = MetricsReport(finals=[FinalRow("bn", 0, 0.8, 0.7, 0.6, 0.65)])
        text, csv_text = compare_table(report)
        assert csv_text.splitlines()[1] == "bn,0.800000,0.000000,0.700000,0.600000,0.650000,0.000"
        assert "80.00 ±  0.00" in text

    def test_mean_and_std_across_seeds(self):
        report = MetricsReport(finals=[FinalRow("sbn", 0, 0.8, 0.8, 0.8, 0.8),
                                       FinalRow("sbn", 1, 0.9, 0.8, 0.8, 0.8)])
        summary = report.summary()[0]
        assert summary.acc_mean == pytest.approx(0.85)
        assert summary.acc_std == pytest.approx(0.05)
        assert summary.seeds == 2

    def test_identical_methods_identical_cells(self):
        finals = [FinalRow(method, seed, 0.5 + 0.1 * seed, 0.4, 0.3, 0.2)
                  for method in ("bn", "ln") for seed in range(3)]
        _, csv_text = compare_table(MetricsReport(finals=finals))
        bn_line, ln_line = csv_text.splitlines()[1:]
        assert bn_line.split(",")[1:] == ln_line.split(",")[1:]

    def test_timing_only_when_requested(self):
        finals = [FinalRow("bn", 0, 0.5, 0.5, 0.5, 0.5)]
        hidden = compare_table(MetricsReport(finals=finals, wall_s={"bn": 1.25}))[1]
        shown = compare_table(MetricsReport(finals=finals, wall_s={"bn": 1.25},
                                            include_timing=True))[1]
        assert hidden.splitlines()[1].endswith(",0.000")
        assert shown.splitlines()[1].endswith(",1.250")

    def test_empty_report(self):
        with pytest.raises(NormError) as info:
            compare_table(MetricsReport())
        assert info.value.code is ErrorCode.EMPTY_REPORT

    def test_consistency_flags_mismatch(self):
        report = MetricsReport(rows=[EpochRow("bn", 0, 0, 0.5, 0.7, 0.6),
                                     EpochRow("bn", 0, 1, 0.4, 0.8, 0.75)],
                               finals=[FinalRow("bn", 0, 0.6, 0.6, 0.6, 0.6)])
        problems = check_consistency(report)
        assert len(problems) == 1 and "bn/seed 0" in problems[0]

    def test_torn_last_line_is_skipped(self, tmp_path):
        run_experiment(make_config(training={"seeds": [0, 1]}), str(tmp_path))
        rows_path = tmp_path / ROWS_FILE
        rows_path.write_text(rows_path.read_text() + "bn,2,0,0.5")
        report = read_report(str(tmp_path))
        assert len(report.rows) == 2


def _mean_acc(report, method):
    return float(np.mean([row.acc for row in report.finals if row.method == method]))


@pytest.mark.slow
def test_sbn_beats_bn_on_heterogeneous_contexts():
    config = config_from_dict({
        "name": "mixture-trend",
        "dataset": {"generator": "mixture_classification",
                    "params": {"k": 4, "classes": 4, "n_per_context": 500, "dim": 16,
                               "context_shift": 20.0, "class_margin": 3.0, "seed": 0}},
        "contexts": {"source": "kmeans", "k": 4},
        "methods": ["bn", "sbn-4"],
        "model": {"hidden": [64, 64]},
        "training": {"epochs": 20, "batch_size": 64, "lr": 1e-3, "seeds": [0, 1, 2, 3, 4]},
        "workers": 2,
    })
    report = run_experiment(config)
    assert _mean_acc(report, "sbn-4") >= _mean_acc(report, "bn") + 0.02


@pytest.mark.slow
def test_more_contexts_do_not_degrade_sbn():
    # eight true modes: K=2 and K=4 merge them, K=8 recovers them
    config = config_from_dict({
        "name": "k-sweep",
        "dataset": {"generator": "mixture_classification",
                    "params": {"k": 8, "classes": 4, "n_per_context": 400, "dim": 16,
                               "context_shift": 20.0, "class_margin": 3.0, "seed": 0}},
        "contexts": {"source": "kmeans", "k": 8},
        "methods": ["sbn-2", "sbn-4", "sbn-8"],
        "model": {"hidden": [64, 64]},
        "training": {"epochs": 20, "batch_size": 128, "lr": 1e-3, "seeds": [0, 1, 2, 3, 4]},
        "workers": 2,
    })
    report = run_experiment(config)
    sweep = [_mean_acc(report, name) for name in ("sbn-2", "sbn-4", "sbn-8")]
    for fewer, more in zip(sweep, sweep[1:]):
        assert more >= fewer - 0.02


@pytest.mark.slow
def test_sbn_helps_unlabeled_target_domain():
    config = config_from_dict({
        "name": "domain-trend",
        "dataset": {"generator": "domain_shift",
                    "params": {"classes": 4, "n_source": 1000, "n_target": 1000, "dim": 16,
                               "scale_shift": 3.0, "mean_shift": 5.0, "seed": 0}},
        "contexts": {"source": "labels"},
        "methods": ["bn", "sbn"],
        "model": {"hidden": [64, 64]},
        "training": {"epochs": 20, "batch_size": 64, "lr": 1e-3, "seeds": [0, 1, 2, 3, 4],
                     "unlabeled_contexts": [1]},
        "evaluation": {"focus_context": 1},
        "workers": 2,
    })
    report = run_experiment(config)
    assert _mean_acc(report, "sbn") >= _mean_acc(report, "bn") + 0.05
