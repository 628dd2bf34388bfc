import json
from pathlib import Path

import pandas as pd
import pytest

from stateagent.cli import EXIT_ABORTED, EXIT_DEPENDENCY, EXIT_OK, EXIT_USAGE, build_parser, main, settings_from
from stateagent.models.manifest import MANIFEST_NAME, RunManifest
from stateagent.utils.exporters import SampleExporter, TrajectoryStore
from stateagent.utils.validators import InputValidator

from .conftest import FACT_VALUE, UnreachablePolicy, make_corpus

QUERY = "What is the vault code?"
NOTE_RULE = r"vault=The vault code is (?P<value>\w+)\."


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(make_corpus(4, fact_at=2), encoding="utf-8")
    return path


def run_args(corpus_file, out, *extra):
    return [
        "run", "--corpus", str(corpus_file), "--query", QUERY, "--golden", FACT_VALUE,
        "--note-rule", NOTE_RULE, "--chunk-size", "512", "--out", str(out), *extra,
    ]


def test_run_writes_trajectories_and_manifest(corpus_file, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("STATEAGENT_API_KEY", "supersecret")
    out = tmp_path / "run"
    assert main(run_args(corpus_file, out, "--repeats", "2")) == EXIT_OK

    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [line["status"] for line in lines] == ["finished", "finished"]
    assert lines[0]["answer"] == FACT_VALUE

    trajectories = TrajectoryStore.load_dir(out)
    assert len(trajectories) == 2
    manifest = RunManifest.read(out)
    assert manifest.command == "run"
    assert manifest.config["chunk_size"] == 512
    assert len(manifest.input_hashes["corpus"]) == 64
    assert len(manifest.output_paths) == 2
    assert "supersecret" not in (out / MANIFEST_NAME).read_text(encoding="utf-8")


def test_no_search_flag(corpus_file, tmp_path):
    out = tmp_path / "run"
    assert main(run_args(corpus_file, out, "--no-search")) == EXIT_OK
    trajectory = TrajectoryStore.load_dir(out)[0]
    assert "searchEngine" not in [event.tool_name for event in trajectory.events]
    assert all(name.value != "searchEngine" for name in trajectory.config.tool_set.enabled)

    # a search plan cannot run without the search tool
    assert main(run_args(corpus_file, tmp_path / "search", "--no-search", "--strategy", "keyword_search",
                         "--target-key", "vault")) == EXIT_USAGE


def test_documented_episode_flags():
    args = build_parser().parse_args([
        "run", "--corpus", "F", "--query", "Q", "--policy", "oracle", "--budget", "32000", "--rounds", "150",
        "--max-rounds", "200", "--no-search", "--delete-mode", "toolcalls_only",
    ])
    assert (args.token_budget, args.rounds_budget, args.max_rounds) == (32000, 150, 200)
    assert args.no_search and args.delete_mode == "toolcalls_only"
    assert args.out == Path("runs")

    settings = settings_from(args)
    assert (settings.token_budget, settings.rounds_budget, settings.max_rounds) == (32000, 150, 200)

    long_form = build_parser().parse_args(["run", "--corpus", "F", "--token-budget", "9000", "--rounds-budget", "40"])
    assert (long_form.token_budget, long_form.rounds_budget) == (9000, 40)


def test_run_with_budget_flags(corpus_file, tmp_path):
    out = tmp_path / "run"
    assert main(run_args(corpus_file, out, "--budget", "20000", "--rounds", "50", "--max-rounds", "60")) == EXIT_OK
    config = RunManifest.read(out).config
    assert (config["token_budget"], config["rounds_budget"], config["max_rounds"]) == (20000, 50, 60)


def test_unreachable_endpoint_exits_after_writing(corpus_file, tmp_path, monkeypatch):
    monkeypatch.setattr("stateagent.cli.RemotePolicy", lambda endpoint: UnreachablePolicy())
    out = tmp_path / "run"
    code = main(run_args(corpus_file, out, "--policy", "remote", "--endpoint", "http://localhost:8000/v1",
                         "--model", "m", "--repeats", "2"))

    assert code == EXIT_DEPENDENCY
    trajectories = TrajectoryStore.load_dir(out)
    assert len(trajectories) == 2
    assert all(t.transport_error for t in trajectories)
    assert (out / MANIFEST_NAME).is_file()


def test_endpoint_url_validation():
    assert InputValidator.validate_endpoint_url("http://localhost:8000/v1")
    assert InputValidator.validate_endpoint_url("https://api.example.com/v1")
    assert InputValidator.validate_endpoint_url("http://127.0.0.1:9000/v1")
    assert not InputValidator.validate_endpoint_url("ftp://example.com/v1")
    assert not InputValidator.validate_endpoint_url("localhost:8000")
    assert not InputValidator.validate_endpoint_url("")


def test_usage_errors(corpus_file, tmp_path):
    assert main(run_args(tmp_path / "missing.txt", tmp_path / "a")) == EXIT_USAGE
    assert main(run_args(corpus_file, tmp_path / "b", "--policy", "remote")) == EXIT_USAGE
    assert main(run_args(corpus_file, tmp_path / "c", "--chunk-size", "100")) == EXIT_USAGE
    assert main(["gen-niah", "--lengths", "lots", "--out", str(tmp_path / "d")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exit_info:
        main(["run"])
    assert exit_info.value.code == 2


def test_replay_command(corpus_file, tmp_path):
    out = tmp_path / "run"
    main(run_args(corpus_file, out))
    trajectory_path = next(path for path in out.glob("*.json") if path.name != MANIFEST_NAME)

    assert main(["replay", "--trajectory", str(trajectory_path), "--corpus", str(corpus_file),
                 "--out", str(tmp_path / "replay")]) == EXIT_OK
    assert list((tmp_path / "replay").glob("replay_*.json"))
    assert main(["stats", "--trajectories", str(tmp_path / "replay"), "--tags", "default"]) == EXIT_OK

    other = tmp_path / "other.txt"
    other.write_text(make_corpus(4, seed=9), encoding="utf-8")
    assert main(["replay", "--trajectory", str(trajectory_path), "--corpus", str(other)]) == EXIT_ABORTED


def test_gen_niah_then_run_grid(tmp_path):
    grid_dir = tmp_path / "grid"
    assert main(["gen-niah", "--lengths", "2K,4K", "--per-cell", "2", "--seed", "3", "--out", str(grid_dir)]) == EXIT_OK
    assert (grid_dir / "manifest.json").is_file()
    assert len(list(grid_dir.glob("niah-*.json"))) == 4

    out = tmp_path / "results"
    assert main([
        "run-grid", "--manifest", str(grid_dir / "manifest.json"), "--policy", "oracle", "--policy", "truncation",
        "--format", "csv", "--keep-trajectories", "--out", str(out),
    ]) == EXIT_OK

    records = pd.read_csv(out / "records.csv")
    assert len(records) == 8
    accuracy = pd.read_csv(out / "accuracy.csv", index_col="Policy")
    assert accuracy.loc["oracle"].tolist() == [100.0, 100.0]
    assert (out / "accuracy_by_position.csv").is_file()
    assert len(TrajectoryStore.load_dir(out / "trajectories" / "oracle")) == 4
    assert RunManifest.read(out).seeds == {"grid_seed": 3}


def test_forge_command(corpus_file, tmp_path):
    runs = tmp_path / "run"
    main(run_args(corpus_file, runs, "--repeats", "2", "--tag", "synthetic"))
    rounds = sum(t.rounds for t in TrajectoryStore.load_dir(runs))

    out = tmp_path / "forge"
    assert main(["forge", "--trajectories", str(runs), "--out", str(out), "--caps", "deleteContext=0.4",
                 "--rl-snapshots", "1"]) == EXIT_OK

    samples = SampleExporter.read_samples(out / "samples.jsonl")
    assert 0 < len(samples) <= rounds
    deletes = sum(1 for sample in samples if sample.primary_action == "deleteContext")
    assert deletes <= 0.4 * len(samples)
    assert (out / "funnel.md").read_text(encoding="utf-8").count("synthetic") == 1
    assert json.loads((out / "balance.json").read_text(encoding="utf-8"))["caps"] == {"deleteContext": 0.4}
    rl_lines = (out / "rl_batch.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["advantage"] for line in rl_lines] == [0.0, 0.0]

    assert main(["forge", "--trajectories", str(runs), "--out", str(out), "--caps", "teleport=0.5"]) == EXIT_USAGE


def test_forge_and_stats_on_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["forge", "--trajectories", str(empty), "--out", str(tmp_path / "forge")]) == EXIT_OK
    assert (tmp_path / "forge" / "samples.jsonl").read_text(encoding="utf-8") == ""

    capsys.readouterr()
    assert main(["stats", "--trajectories", str(empty), "--tags", "niah", "--format", "csv"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == ["Benchmark,Rounds,mem,del,srh", "niah,0.0,0.0,0.0,0.0"]
    assert main(["stats", "--trajectories", str(tmp_path / "nowhere")]) == EXIT_USAGE
