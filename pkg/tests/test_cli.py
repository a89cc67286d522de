"""End-to-end command-line runs on a miniature corpus."""

import json
import math

import numpy as np
import pytest

from uapkit import serialize
from uapkit.cli import main
from uapkit.data_io import load_dataset, load_manifest
from uapkit.digits import write_corpus
from uapkit.evaluation import accuracy
from uapkit.network import Network
from uapkit.cli import DEFAULT_ARCHITECTURE, _layer_specs


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    train_manifest, test_manifest = write_corpus(
        root, train_counts=(60, 60, 30), test_counts=(20, 20, 10),
        caps={"eight": 12}, seed=5)
    return train_manifest, test_manifest


def run(args):
    return main([str(a) for a in args])


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return path


@pytest.fixture(scope="module")
def trained_model(corpus, tmp_path_factory):
    train_manifest, test_manifest = corpus
    out = tmp_path_factory.mktemp("model")
    cfg = write_json(out / "train.json", {
        "train_dataset": str(train_manifest),
        "test_dataset": str(test_manifest),
        "epochs": 6, "lr": 0.05, "batch_size": 16, "seed": 0,
    })
    assert run(["train", "--config", cfg, "--out", out]) == 0
    return out / "model.dnet", out / "train_report.json"


class TestTrainCommand:
    def test_writes_checkpoint_with_magic(self, trained_model):
        model_path, report_path = trained_model
        assert model_path.read_bytes()[:4] == b"DNET"
        report = json.loads(report_path.read_text())
        assert report["command"] == "train"
        assert 0.0 <= report["train_accuracy"] <= 1.0
        assert report["config"]["epochs"] == 6
        assert report["config"]["seed"] == 0
        assert "seed_streams" in report

    def test_caps_shaped_the_training_set(self, corpus):
        train_manifest, _ = corpus
        data = load_dataset(load_manifest(train_manifest))
        assert np.array_equal(data.class_counts(), [60, 60, 12])

    def test_zero_epochs_reports_untrained_accuracy(self, corpus, tmp_path):
        train_manifest, test_manifest = corpus
        cfg = write_json(tmp_path / "cfg.json", {
            "train_dataset": str(train_manifest),
            "test_dataset": str(test_manifest),
            "epochs": 0, "seed": 3,
        })
        assert run(["train", "--config", cfg, "--out", tmp_path]) == 0
        report = json.loads((tmp_path / "train_report.json").read_text())

        data = load_dataset(load_manifest(train_manifest))
        fresh = Network(_layer_specs(DEFAULT_ARCHITECTURE),
                        data.images.shape[1:], seed=3)
        assert report["train_accuracy"] == accuracy(fresh, data)

    def test_same_seed_gives_byte_identical_checkpoints(self, corpus,
                                                        tmp_path):
        train_manifest, _ = corpus
        cfg = write_json(tmp_path / "cfg.json", {
            "train_dataset": str(train_manifest), "epochs": 2, "seed": 8,
        })
        blobs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert run(["train", "--config", cfg, "--out", out]) == 0
            blobs.append((out / "model.dnet").read_bytes())
        assert blobs[0] == blobs[1]


class TestAttackCommand:
    def attack_config(self, corpus, trained_model, tmp_path, **over):
        train_manifest, test_manifest = corpus
        model_path, _ = trained_model
        payload = {
            "model": str(model_path),
            "train_dataset": str(train_manifest),
            "test_dataset": str(test_manifest),
            "norm": "inf", "zeta": 0.1, "eps": 0.01, "i_max": 2, "seed": 1,
        }
        payload.update(over)
        return write_json(tmp_path / "attack.json", payload)

    def test_nontargeted_report_covers_both_splits(self, corpus,
                                                   trained_model, tmp_path):
        cfg = self.attack_config(corpus, trained_model, tmp_path)
        assert run(["attack", "--config", cfg, "--out", tmp_path]) == 0
        report = json.loads((tmp_path / "attack_report.json").read_text())
        for split in ("train", "test"):
            assert report["results"][split]["metric_name"] == "fooling_rate"
            assert 0.0 <= report["results"][split]["metric_value"] <= 1.0
        assert (tmp_path / "uap.uapf").read_bytes()[:4] == b"UAPF"
        assert (tmp_path / "uap.png").exists()
        assert (tmp_path / "confusion_train.csv").exists()
        assert (tmp_path / "confusion_test.csv").exists()
        assert report["config"]["xi"] > 0

    def test_targeted_without_target_fails_without_outputs(self, corpus,
                                                           trained_model,
                                                           tmp_path):
        cfg = self.attack_config(corpus, trained_model, tmp_path,
                                 mode="targeted")
        out = tmp_path / "out"
        assert run(["attack", "--config", cfg, "--out", out]) == 1
        assert not (out / "attack_report.json").exists()
        assert not (out / "uap.uapf").exists()

    def test_target_by_class_name(self, corpus, trained_model, tmp_path):
        cfg = self.attack_config(corpus, trained_model, tmp_path)
        assert run(["attack", "--config", cfg, "--mode", "targeted",
                    "--target", "eight", "--out", tmp_path]) == 0
        report = json.loads((tmp_path / "attack_report.json").read_text())
        assert report["config"]["target"] == "eight"
        assert report["results"]["test"]["metric_name"] == \
            "targeted_success_rate"

    def test_random_control_evaluated_at_same_radius(self, corpus,
                                                     trained_model, tmp_path):
        cfg = self.attack_config(corpus, trained_model, tmp_path)
        assert run(["attack", "--config", cfg, "--random-control",
                    "--out", tmp_path]) == 0
        report = json.loads((tmp_path / "attack_report.json").read_text())
        assert "random_control" in report
        assert report["random_control"]["test"]["metric_name"] == \
            "fooling_rate"

    def test_unknown_target_name_rejected(self, corpus, trained_model,
                                          tmp_path):
        cfg = self.attack_config(corpus, trained_model, tmp_path)
        out = tmp_path / "out2"
        assert run(["attack", "--config", cfg, "--mode", "targeted",
                    "--target", "bogus", "--out", out]) == 1
        assert not (out / "attack_report.json").exists()


class TestEvalCommand:
    def test_eval_clean_and_with_perturbation(self, corpus, trained_model,
                                              tmp_path):
        train_manifest, test_manifest = corpus
        model_path, _ = trained_model
        cfg = write_json(tmp_path / "eval.json", {
            "model": str(model_path), "dataset": str(test_manifest),
        })
        assert run(["eval", "--config", cfg, "--out", tmp_path]) == 0
        report = json.loads((tmp_path / "eval_report.json").read_text())
        assert report["results"]["accuracy"] >= 0.0
        assert (tmp_path / "confusion.csv").exists()

    def test_eval_with_stored_perturbation(self, corpus, trained_model,
                                           tmp_path):
        from uapkit.attacks import AttackBudget, Perturbation
        train_manifest, test_manifest = corpus
        model_path, _ = trained_model
        pert_path = tmp_path / "rho.uapf"
        serialize.save_perturbation(
            Perturbation(np.full((28, 28, 1), 3.0),
                         AttackBudget(math.inf, 3.0), "random"), pert_path)
        cfg = write_json(tmp_path / "eval.json", {
            "model": str(model_path), "dataset": str(test_manifest),
            "perturbation": str(pert_path),
        })
        assert run(["eval", "--config", cfg, "--out", tmp_path]) == 0
        report = json.loads((tmp_path / "eval_report.json").read_text())
        assert report["config"]["provenance"] == "file"


class TestRetrainCommand:
    def retrain_config(self, corpus, trained_model, tmp_path, **over):
        train_manifest, test_manifest = corpus
        model_path, _ = trained_model
        payload = {
            "model": str(model_path),
            "train_dataset": str(train_manifest),
            "test_dataset": str(test_manifest),
            "norm": "inf", "zeta": 0.1, "eps": 0.01, "i_max": 1,
            "n_uaps": 2, "extra_epochs": 1, "iterations": 1,
            "lr": 0.02, "batch_size": 16, "seed": 2,
        }
        payload.update(over)
        return write_json(tmp_path / "retrain.json", payload)

    def test_zero_iterations_keeps_model_and_writes_empty_history(
            self, corpus, trained_model, tmp_path):
        model_path, _ = trained_model
        cfg = self.retrain_config(corpus, trained_model, tmp_path,
                                  iterations=0)
        assert run(["retrain", "--config", cfg, "--out", tmp_path]) == 0
        lines = (tmp_path / "retrain_history.csv").read_text().splitlines()
        assert lines == ["iteration,metric,clean_accuracy,seconds"]
        # identical forward behavior, and identical bytes up to re-encoding
        assert (tmp_path / "hardened.dnet").read_bytes() == \
            model_path.read_bytes()

    def test_history_row_count_matches_iterations(self, corpus,
                                                  trained_model, tmp_path):
        cfg = self.retrain_config(corpus, trained_model, tmp_path)
        assert run(["retrain", "--config", cfg, "--out", tmp_path]) == 0
        payload = json.loads((tmp_path / "retrain_history.json").read_text())
        assert len(payload["history"]) == 1
        csv_lines = (tmp_path / "retrain_history.csv").read_text().strip()
        assert len(csv_lines.splitlines()) == 2

    def test_same_seed_histories_identical_up_to_timing(self, corpus,
                                                        trained_model,
                                                        tmp_path):
        cfg = self.retrain_config(corpus, trained_model, tmp_path)
        payloads = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert run(["retrain", "--config", cfg, "--out", out]) == 0
            payload = json.loads((out / "retrain_history.json").read_text())
            for record in payload["history"]:
                record.pop("seconds")
            payloads.append(payload)
        assert payloads[0] == payloads[1]


class TestErrorHandling:
    def test_missing_config_key_exits_nonzero(self, tmp_path):
        cfg = write_json(tmp_path / "bad.json", {"epochs": 1})
        assert run(["train", "--config", cfg, "--out", tmp_path]) == 1
        assert not (tmp_path / "model.dnet").exists()

    def test_bad_norm_rejected(self, corpus, trained_model, tmp_path):
        train_manifest, test_manifest = corpus
        model_path, _ = trained_model
        cfg = write_json(tmp_path / "bad.json", {
            "model": str(model_path), "train_dataset": str(train_manifest),
            "test_dataset": str(test_manifest), "norm": "7", "zeta": 0.1,
        })
        assert run(["attack", "--config", cfg, "--out", tmp_path]) == 1
