import pytest

from stateagent.models.bench import STANDARD_LENGTHS, BenchGrid, NiahInstance, parse_length, parse_lengths
from stateagent.models.tools import DeleteMode, ToolName
from stateagent.models.trajectory import EpisodeConfig
from stateagent.models.training import Correctness
from stateagent.services.niah import (
    accuracy_table,
    generate_grid,
    generate_instance,
    grade,
    grid_episode_config,
    instance_seed,
    load_instances,
    niah_plan,
    position_table,
    run_grid,
    write_instances,
)
from stateagent.services.oracle import OraclePolicy, TruncationPolicy

from .conftest import UnreachablePolicy


def oracle_factory(chunk_size):
    return lambda instance, config: OraclePolicy(niah_plan(instance, chunk_size), config.tool_set)


def truncation_factory(chunk_size):
    return lambda instance, config: TruncationPolicy(niah_plan(instance, chunk_size), config.tool_set)


def test_generation_is_seeded():
    first = generate_instance(4000, 0.3, seed=5)
    assert first == generate_instance(4000, 0.3, seed=5)
    assert first.haystack != generate_instance(4000, 0.3, seed=6).haystack


def test_needle_lands_at_requested_position():
    start = generate_instance(4000, 0.0, seed=1)
    end = generate_instance(4000, 1.0, seed=1)
    assert start.haystack.startswith(start.needle)
    assert end.haystack.endswith(end.needle)

    middle = generate_instance(8000, 0.5, seed=2)
    offset = middle.haystack.index(middle.needle) / len(middle.haystack)
    assert 0.45 < offset < 0.55


def test_instance_length_and_uniqueness():
    instance = generate_instance(256_000, 0.25, seed=3)
    assert 253_440 <= instance.token_count <= 258_560
    assert instance.haystack.count(instance.needle_value) == 1
    assert instance.needle_key in instance.query
    assert instance.instance_id == "niah-256K-3"


def test_position_out_of_range():
    with pytest.raises(ValueError):
        generate_instance(4000, 1.5, seed=0)


def test_grade():
    instance = generate_instance(2000, 0.5, seed=4)
    assert grade(f"The number is {instance.needle_value}.", instance) == Correctness.CORRECT
    assert grade(instance.needle_value.upper(), instance) == Correctness.CORRECT
    assert grade("", instance) == Correctness.INCORRECT
    assert grade(None, instance) == Correctness.INCORRECT


def test_length_parsing():
    assert parse_length("256K") == 256_000
    assert parse_length("1M") == 1_000_000
    assert parse_lengths("32K..2M") == STANDARD_LENGTHS
    assert parse_lengths("2K,4K") == [2000, 4000]
    with pytest.raises(ValueError):
        parse_length("lots")


def test_grid_episode_config():
    instance = NiahInstance(
        instance_id="x", haystack="x", needle_key="k", needle_value="v", insertion_position=0.5,
        query="q", target_length=256_000, token_count=256_000,
    )
    config = grid_episode_config(EpisodeConfig(token_budget=32000, rounds_budget=60, max_rounds=80), instance)

    assert not config.tool_set.is_enabled(ToolName.SEARCH_ENGINE)
    assert config.tool_set.deletion_mode == DeleteMode.TOOLCALLS_ONLY
    # 22 chunks of 12000 tokens
    assert (config.rounds_budget, config.max_rounds) == (64, 114)
    assert config.record_snapshots is False


def test_write_and_load_grid(tmp_path):
    grid = BenchGrid(lengths=[2000, 4000], instances_per_cell=3, seed=1)
    instances = generate_grid(grid)

    assert [i.instance_id for i in instances[:3]] == ["niah-2K-000", "niah-2K-001", "niah-2K-002"]
    assert [i.insertion_position for i in instances[:3]] == [0.0, 0.5, 1.0]
    assert instance_seed(1, 2000, 0) == instances[0].seed
    assert len({i.seed for i in instances}) == len(instances)

    path = write_instances(instances, grid, tmp_path, "whitespace")
    manifest, loaded = load_instances(path)
    assert manifest.grid == grid
    assert manifest.counter_scheme == "whitespace"
    assert loaded == instances


async def test_oracle_grid_is_perfect():
    grid = BenchGrid(lengths=[2000, 4000], instances_per_cell=3, seed=7)
    instances = generate_grid(grid)
    seen = []

    records = await run_grid(
        instances,
        {"oracle": oracle_factory(512)},
        EpisodeConfig(),
        repeats=2,
        chunk_size=512,
        on_trajectory=lambda name, trajectory: seen.append(name),
    )

    assert len(records) == len(seen) == 12
    assert all(record.correct for record in records)
    assert all(record.peak_tokens < 32000 for record in records)

    table = accuracy_table(records)
    assert list(table.columns) == ["2K", "4K"]
    assert table.index.name == "Policy"
    assert table.loc["oracle"].tolist() == [100.0, 100.0]

    by_position = position_table(records)
    assert list(by_position.columns) == ["0.0-0.2", "0.4-0.6", "0.8-1.0"]


async def test_truncation_misses_late_needle():
    instance = generate_instance(256_000, 0.9, seed=8)
    records = await run_grid(
        [instance],
        {"oracle": oracle_factory(12000), "truncation": truncation_factory(12000)},
        EpisodeConfig(),
    )

    table = accuracy_table(records)
    assert table.loc["oracle", "256K"] == 100.0
    assert table.loc["truncation", "256K"] == 0.0
    truncated = next(r for r in records if r.policy == "truncation")
    assert truncated.status == "finished"


async def test_unreachable_policy_cells_grade_incorrect():
    instances = generate_grid(BenchGrid(lengths=[2000], instances_per_cell=2, seed=5))
    records = await run_grid(
        instances,
        {"oracle": oracle_factory(512), "remote": lambda instance, config: UnreachablePolicy()},
        EpisodeConfig(),
        chunk_size=512,
    )

    assert len(records) == 4
    down = [record for record in records if record.policy == "remote"]
    assert all(not record.correct and record.status == "protocol_error" for record in down)
    assert all(record.transport_error for record in down)
    assert accuracy_table(records).loc["oracle", "2K"] == 100.0
    assert accuracy_table(records).loc["remote", "2K"] == 0.0


def test_empty_tables():
    assert accuracy_table([]).empty
    assert position_table([]).empty


@pytest.mark.slow
async def test_oracle_across_standard_lengths():
    grid = BenchGrid(lengths=STANDARD_LENGTHS, instances_per_cell=5, seed=0)
    records = await run_grid(generate_grid(grid), {"oracle": oracle_factory(12000)}, EpisodeConfig(), jobs=4)

    table = accuracy_table(records)
    assert list(table.columns) == ["32K", "64K", "128K", "256K", "512K", "768K", "1M", "2M"]
    assert (table.loc["oracle"] == 100.0).all()
