import json
import time
from types import SimpleNamespace

import pytest
import yaml

from src.adapters import AdapterRole, AdapterSpec, run_adapter
from src.config import load_config
from src.dataio import (
    LABEL_MANIFEST,
    DatasetManifest,
    FrameRecord,
    LabelKind,
    LabelSet,
    Provenance,
    Split,
    load_manifest,
    split_dataset,
)
from src.errors import (
    AdapterFailure,
    ConfigError,
    CoverageError,
    FailureReason,
    MissingComponentError,
    PreconditionError,
    UsageError,
)
from src.geometry import preset_grid
from src.heatmap import DetectionSet
from src.metrics import evaluate, pair_frames
from src.orchestrator import (
    PREVIOUS,
    SCENARIOS,
    RoundPlan,
    TrainingMode,
    TrainingSetSpec,
    TrainMode,
    campaign_lock,
    compose_training_set,
    digest_path,
    generate_labels,
    load_campaign,
    run_campaign,
    run_detector,
)

from conftest import detector_command, make_dataset, trainer_command


@pytest.fixture
def cfg(monkeypatch):
    monkeypatch.delenv("MVLABEL_DATA_ROOT", raising=False)
    monkeypatch.delenv("MVLABEL_LOG_LEVEL", raising=False)
    return load_config(overrides={"workers": 2})


@pytest.fixture
def toy(tmp_path, small_grid):
    """Source and target datasets of 20 frames each (16/2/2 split) plus an
    empty source model."""
    data = tmp_path / "data"
    data.mkdir()
    source, _ = make_dataset(data, "source", small_grid, seed=1)
    target, target_gt = make_dataset(data, "target", small_grid, seed=2)
    model = data / "source_model.json"
    model.write_text(json.dumps({"memory": {}}))
    return SimpleNamespace(source=source, target=target, target_gt=target_gt, model=model,
                           out=tmp_path / "run", dir=tmp_path)


def _campaign(toy, cfg, **doc):
    base = {
        "name": "toy",
        "source": str(toy.source),
        "target": str(toy.target),
        "output_dir": str(toy.out),
        "adapters": {
            "echo": {"role": "detector", "command": detector_command("--annotations", toy.target_gt)},
            "broken": {"role": "detector", "command": detector_command("--exit-code", 5)},
            "trainer": {"role": "trainer", "command": trainer_command()},
        },
        "detector": "echo",
        "untrained_detector": "echo",
        "trainer": "trainer",
    }
    base.update(doc)
    path = toy.dir / "campaign.yaml"
    path.write_text(yaml.safe_dump(base))
    return load_campaign(path, cfg)


def _echo(toy, *extra, timeout=120.0):
    return AdapterSpec("echo", AdapterRole.DETECTOR,
                       tuple(detector_command("--annotations", toy.target_gt, *extra)), timeout=timeout)


class TestDetectorRuns:
    def test_echo_detector_is_perfect(self, toy, cfg):
        target = load_manifest(toy.target)
        frames = target.frames_in(None)
        found = run_detector(_echo(toy), target, frames, toy.dir / "work", cfg)
        assert list(found) == target.frame_ids
        gts = [a.gts for a in target.load_annotations().values()]
        assert evaluate(pair_frames(list(found.values()), gts)).moda == 1.0

    def test_heatmap_output_is_reduced_to_locations(self, toy, cfg):
        target = load_manifest(toy.target)
        found = run_detector(_echo(toy, "--emit", "heatmaps"), target, target.frames_in(None),
                             toy.dir / "work", cfg)
        gts = [a.gts for a in target.load_annotations().values()]
        report = evaluate(pair_frames(list(found.values()), gts))
        assert report.moda == 1.0
        assert report.modp > 0.7

    def test_non_zero_exit(self, toy, cfg):
        target = load_manifest(toy.target)
        with pytest.raises(AdapterFailure) as err:
            run_detector(_echo(toy, "--exit-code", 3), target, target.frames_in(None), toy.dir / "w", cfg)
        assert err.value.reason == FailureReason.EXIT_CODE
        assert err.value.returncode == 3
        assert "failing on purpose" in err.value.diagnostics
        assert err.value.exit_code == 3

    def test_timeout_kills_the_process(self, toy, cfg):
        target = load_manifest(toy.target)
        t0 = time.time()
        with pytest.raises(AdapterFailure) as err:
            run_detector(_echo(toy, "--sleep", 60, timeout=1.0), target, target.frames_in(None),
                         toy.dir / "w", cfg)
        assert err.value.reason == FailureReason.TIMEOUT
        assert time.time() - t0 < 30

    def test_garbage_output(self, toy, cfg):
        target = load_manifest(toy.target)
        with pytest.raises(AdapterFailure) as err:
            run_detector(_echo(toy, "--garbage"), target, target.frames_in(None), toy.dir / "w", cfg)
        assert err.value.reason == FailureReason.MALFORMED_OUTPUT

    def test_missing_frame(self, toy, cfg):
        target = load_manifest(toy.target)
        dropped = target.frame_ids[3]
        with pytest.raises(CoverageError) as err:
            run_detector(_echo(toy, "--drop-frame", dropped), target, target.frames_in(None),
                         toy.dir / "w", cfg)
        assert err.value.missing == [dropped]

    def test_launch_failure(self, tmp_path):
        spec = AdapterSpec("nope", "detector", ("/nonexistent/detector",))
        inv = tmp_path / "inv.json"
        inv.write_text("{}")
        with pytest.raises(AdapterFailure) as err:
            run_adapter(spec, inv, tmp_path / "out", tmp_path / "logs")
        assert err.value.reason == FailureReason.LAUNCH

    def test_unknown_placeholder(self, tmp_path):
        spec = AdapterSpec("bad", "detector", ("{python}", "{weights}"))
        with pytest.raises(ConfigError):
            run_adapter(spec, tmp_path / "inv.json", tmp_path / "out", tmp_path / "logs")

    def test_generated_labels_carry_provenance(self, toy, cfg):
        target = load_manifest(toy.target)
        labels = generate_labels(_echo(toy), target, Split.TRAIN, toy.dir / "labels", cfg,
                                 LabelKind.ALT, round_index=0, input_digest="abc")
        assert len(labels.frames) == 16
        assert labels.provenance.adapter_id == "echo"
        assert labels.provenance.input_digest == "abc"
        assert all(p.exists() for p in labels.heatmaps.values())
        assert (toy.dir / "labels" / LABEL_MANIFEST).exists()


def _manifests(n_source=400, n_target=400):
    grid = preset_grid("wildtrack")
    source = split_dataset(DatasetManifest("src", grid, frames=tuple(FrameRecord(f"s{i}") for i in range(n_source))),
                           (0.9, 0.1))
    target = split_dataset(DatasetManifest("tgt", grid, frames=tuple(FrameRecord(f"t{i}") for i in range(n_target))),
                           (0.8, 0.1, 0.1))
    return source, target


def _labels(kind, manifest, prov=Provenance("det", "c", "i", 0)):
    frames = {f.frame_id: DetectionSet(f.frame_id) for f in manifest.frames_in(Split.TRAIN)}
    return LabelSet(kind, manifest.name, frames, provenance=prov if LabelKind(kind).is_generated else None)


class TestTrainingSets:
    def test_alt_only(self):
        source, target = _manifests()
        spec = TrainingSetSpec(frozenset({LabelKind.ALT}), source, target)
        training = compose_training_set(spec, {LabelKind.ALT: _labels(LabelKind.ALT, target)})
        assert training.counts() == {"ALT": 320}

    def test_ls_plus_alt(self):
        source, target = _manifests()
        spec = TrainingSetSpec(frozenset({LabelKind.LS, LabelKind.ALT}), source, target)
        training = compose_training_set(spec, {
            LabelKind.LS: _labels(LabelKind.LS, source),
            LabelKind.ALT: _labels(LabelKind.ALT, target),
        })
        assert training.counts() == {"LS": 360, "ALT": 320}
        assert len(training.entries) == 680
        assert training.entries[0].origin == LabelKind.LS
        assert spec.describe() == "LS + ALT"

    def test_missing_component(self):
        source, target = _manifests()
        spec = TrainingSetSpec(frozenset({LabelKind.LS, LabelKind.PLT}), source, target)
        with pytest.raises(MissingComponentError):
            compose_training_set(spec, {LabelKind.LS: _labels(LabelKind.LS, source)})

    def test_plt_and_alt_exclusive(self):
        source, target = _manifests()
        with pytest.raises(PreconditionError):
            TrainingSetSpec(frozenset({LabelKind.PLT, LabelKind.ALT}), source, target)

    def test_lt_needs_ground_truth(self):
        source, target = _manifests()
        with pytest.raises(PreconditionError):
            TrainingSetSpec(frozenset({LabelKind.LT}), source, target)

    def test_empty(self):
        with pytest.raises(PreconditionError):
            TrainingSetSpec(frozenset())


class TestPlans:
    def test_fine_tuning_needs_init_model(self):
        with pytest.raises(PreconditionError):
            TrainingMode(TrainMode.FT)

    def test_plt_defaults_to_previous_model(self):
        source, target = _manifests()
        plan = RoundPlan(0, TrainingSetSpec(frozenset({LabelKind.PLT}), source, target), labeler="det")
        assert plan.label_kind == LabelKind.PLT
        assert plan.labeler_model == PREVIOUS

    def test_plt_after_round_zero_uses_last_model(self, tmp_path):
        source, target = _manifests()
        spec = TrainingSetSpec(frozenset({LabelKind.PLT}), source, target)
        with pytest.raises(PreconditionError):
            RoundPlan(1, spec, labeler="det", labeler_model=str(tmp_path / "other.json"))

    def test_generated_labels_need_a_labeler(self):
        source, target = _manifests()
        with pytest.raises(PreconditionError):
            RoundPlan(0, TrainingSetSpec(frozenset({LabelKind.ALT}), source, target))

    def test_scenarios(self):
        source, target = _manifests()
        (plan,) = SCENARIOS["ls_plt"](source, target, "det", "untrained", 1)
        assert plan.training_set.describe() == "LS + PLT" and plan.labeler == "det"
        (plan,) = SCENARIOS["alt_ft"](source, target, "det", "untrained", 1)
        assert plan.labeler == "untrained"
        assert plan.training_mode == TrainingMode(TrainMode.FT, PREVIOUS)
        rounds = SCENARIOS["multi_round"](source, target, "det", "untrained", 3)
        assert [p.label_kind for p in rounds] == [LabelKind.ALT, LabelKind.PLT, LabelKind.PLT]
        assert [p.labeler for p in rounds] == ["untrained", "det", "det"]
        assert all(p.training_mode.mode == TrainMode.FT for p in rounds)
        assert SCENARIOS["multi_round"](source, target, "det", "untrained", 0) == []


class TestCampaignFiles:
    def test_unknown_key(self, toy, cfg):
        with pytest.raises(ConfigError):
            _campaign(toy, cfg, epochs=3)

    def test_scenario_and_rounds_exclusive(self, toy, cfg):
        with pytest.raises(ConfigError):
            _campaign(toy, cfg, scenario="alt_only", rounds=[{"components": ["ALT"], "labeler": "echo"}])

    def test_unknown_scenario(self, toy, cfg):
        with pytest.raises(ConfigError):
            _campaign(toy, cfg, scenario="everything")

    def test_round_defaults(self, toy, cfg):
        camp = _campaign(toy, cfg, rounds=[
            {"components": ["LS", "ALT"], "labeler": "echo"},
            {"components": ["PLT"], "labeler": "echo"},
        ])
        assert camp.rounds[0].training_mode.mode == TrainMode.FS
        assert camp.rounds[1].training_mode == TrainingMode(TrainMode.FT, PREVIOUS)
        assert camp.rounds[1].labeler_model == PREVIOUS

    def test_adapter_role_checked(self, toy, cfg):
        camp = _campaign(toy, cfg, trainer="echo", rounds=[{"components": ["ALT"], "labeler": "echo"}])
        with pytest.raises(ConfigError):
            camp.validate()


def _rows(directory):
    return json.loads((directory / "summary.json").read_text())["rows"]


class TestCampaigns:
    def test_fine_tuning_without_a_model_fails_before_launch(self, toy, cfg):
        camp = _campaign(toy, cfg, rounds=[{"components": ["ALT"], "labeler": "echo", "mode": "FT"}])
        with pytest.raises(PreconditionError):
            run_campaign(camp)
        assert not toy.out.exists()

    def test_multi_round_reaches_a_fixed_point(self, toy, cfg):
        camp = _campaign(toy, cfg, scenario="multi_round", n_rounds=3,
                         source_model=str(toy.model), baseline=True)
        results = run_campaign(camp)

        assert [r.al_rounds for r in results] == [0, 1, 2, 3]
        assert [r.training_data for r in results] == ["LS only", "ALT only", "PLT only", "PLT only"]
        assert all(r.validation.moda == 1.0 for r in results)

        manifests = [(r.label_set / LABEL_MANIFEST).read_bytes() for r in results[1:]]
        assert manifests[0] == manifests[1] == manifests[2]
        models = [r.model.read_bytes() for r in results[1:]]
        assert models[0] == models[1] == models[2]

        memory = json.loads(models[0])["memory"]
        assert len(memory) == 16 and all(k.startswith("target/") for k in memory)

        rows = _rows(toy.out)
        assert [row["al_rounds"] for row in rows] == [0, 1, 2, 3]
        assert (toy.out / "summary.csv").read_text().splitlines()[0] == \
            "al_rounds,training_data,moda,modp,precision,recall"
        assert sorted(p.name for p in toy.out.iterdir() if p.is_dir()) == \
            ["baseline", "round_00", "round_01", "round_02"]

    def test_baseline_only(self, toy, cfg):
        camp = _campaign(toy, cfg, rounds=[], source_model=str(toy.model), baseline=True)
        results = run_campaign(camp)
        assert len(results) == 1 and results[0].al_rounds == 0
        assert _rows(toy.out)[0]["training_data"] == "LS only"

    def test_ls_lt_uses_ground_truth_on_both_sides(self, toy, cfg):
        camp = _campaign(toy, cfg, scenario="ls_lt")
        (result,) = run_campaign(camp)
        assert result.training_data == "LS + LT"
        (compose,) = (toy.out / "round_00").glob("compose-*")
        counts = json.loads((compose / "training_manifest.json").read_text())["counts"]
        assert counts == {"LS": 16, "LT": 16}

    def test_failure_keeps_completed_rows(self, toy, cfg):
        camp = _campaign(toy, cfg, rounds=[
            {"components": ["ALT"], "labeler": "echo"},
            {"components": ["PLT"], "labeler": "broken"},
        ])
        with pytest.raises(AdapterFailure):
            run_campaign(camp)
        doc = json.loads((toy.out / "summary.json").read_text())
        assert [row["al_rounds"] for row in doc["rows"]] == [1]
        assert doc["error"]["round"] == 2
        assert doc["error"]["type"] == "AdapterFailure"
        assert "round 2 failed" in (toy.out / "summary.txt").read_text()
        assert not list((toy.out / "round_01").glob("labels-*"))

    def test_resume_reuses_every_step(self, toy, cfg):
        rounds = [{"components": ["LS", "ALT"], "labeler": "echo"}]
        run_campaign(_campaign(toy, cfg, rounds=rounds))
        first = (toy.out / "summary.json").read_bytes()

        with pytest.raises(UsageError):
            run_campaign(_campaign(toy, cfg, rounds=rounds))

        (result,) = run_campaign(_campaign(toy, cfg, rounds=rounds), resume=True)
        assert [s.name for s in result.steps] == ["ls", "labels", "compose", "train", "validate"]
        assert all(s.cached for s in result.steps)
        assert (toy.out / "summary.json").read_bytes() == first

    def test_changed_settings_miss_the_cache(self, toy, cfg):
        rounds = [{"components": ["ALT"], "labeler": "echo"}]
        run_campaign(_campaign(toy, cfg, rounds=rounds))
        stricter = load_config(overrides={"workers": 2, "min_prob": 0.6})
        (result,) = run_campaign(_campaign(toy, stricter, rounds=rounds), resume=True)
        cached = {s.name: s.cached for s in result.steps}
        assert not cached["labels"] and not cached["validate"]
        assert len(list((toy.out / "round_00").glob("labels-*"))) == 2

    def test_lock_is_exclusive(self, tmp_path):
        with campaign_lock(tmp_path):
            with pytest.raises(UsageError):
                with campaign_lock(tmp_path):
                    pass


def test_digest_path_follows_content(tmp_path):
    f = tmp_path / "m.json"
    f.write_text("a")
    before = digest_path(f)
    assert digest_path(f) == before
    f.write_text("b")
    assert digest_path(f) != before
    with pytest.raises(PreconditionError):
        digest_path(tmp_path / "missing")
