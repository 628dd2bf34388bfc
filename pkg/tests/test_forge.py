import itertools

import pytest

from stateagent.errors import InvalidGroup, ReplayMismatch
from stateagent.models.context import Role, Visibility
from stateagent.models.policy import PolicyDecision
from stateagent.models.training import Correctness, FilterReport, TrainingSample
from stateagent.models.trajectory import EpisodeConfig, EpisodeStatus, ScanMode
from stateagent.services.context import replay_log, serialize
from stateagent.services.engine import run_episode
from stateagent.services.forge import (
    FUNNEL_COLUMNS,
    balance_actions,
    build_rl_batch,
    compute_reward,
    explode_samples,
    forge_dataset,
    funnel_table,
    group_advantage,
    outcome_filter,
    process_filter,
    prunes_in_time,
    reads_complete_scan,
    reward_for,
)
from stateagent.services.grading import TwoLayerGrader
from stateagent.services.oracle import OraclePolicy
from stateagent.services.policy import ReplayPolicy
from stateagent.services.spellbook import manifest_lines

from .conftest import FACT_VALUE, make_corpus

QUERY = "What is the vault code?"


def decide(tool, thought="", mode=None, **arguments):
    return PolicyDecision(thought=thought, tool_name=tool, arguments=arguments, declared_mode=mode)


async def oracle_trajectory(config, corpus, plan, golden=FACT_VALUE, tag="synthetic"):
    return await run_episode(config, OraclePolicy(plan, config.tool_set), corpus, QUERY, golden_answer=golden, tag=tag)


async def unpruned_trajectory(config, corpus):
    decisions = [
        decide("analyzeText", mode=ScanMode.LINEAR_SCAN),
        decide("buildIndex", chunk_size=512),
        decide("readChunk", chunk_id=0),
        decide("readChunk", chunk_id=1),
        decide("readChunk", chunk_id=2),
        decide("note", key="vault", text=FACT_VALUE),
        decide("readChunk", chunk_id=3),
        decide("finish", answer=FACT_VALUE),
    ]
    return await run_episode(config, ReplayPolicy(decisions), corpus, QUERY, golden_answer=FACT_VALUE, tag="synthetic")


async def gappy_trajectory(config, corpus):
    # msg 0 is the query; each round appends an assistant turn and its observation
    decisions = [
        decide("analyzeText", mode=ScanMode.LINEAR_SCAN),
        decide("buildIndex", chunk_size=512),
        decide("readChunk", chunk_id=0),
        decide("deleteContext", msg_ids=[6]),
        decide("readChunk", chunk_id=2),
        decide("note", key="vault", text=FACT_VALUE),
        decide("deleteContext", msg_ids=[10, 11]),
        decide("finish", answer=FACT_VALUE),
    ]
    return await run_episode(config, ReplayPolicy(decisions), corpus, QUERY, golden_answer=FACT_VALUE, tag="synthetic")


@pytest.fixture
async def labelled_batch(config, corpus, linear_plan):
    good = await oracle_trajectory(config, corpus, linear_plan)
    wrong = await oracle_trajectory(config, corpus, linear_plan, golden="zz99zz")
    unpruned = await unpruned_trajectory(config, corpus)
    gappy = await gappy_trajectory(config, corpus)
    return good, wrong, unpruned, gappy


@pytest.mark.parametrize("correct, formatted, finished", list(itertools.product([True, False], repeat=3)))
def test_reward_table(correct, formatted, finished):
    expected = (1.0 if correct else -0.5) if formatted and finished else -1.0
    assert reward_for(correct, formatted, finished) == expected


def test_group_advantage():
    advantages = group_advantage([1.0, -0.5, -1.0, 1.0])
    assert abs(sum(advantages)) < 1e-9
    assert advantages[0] > 0 > advantages[2]
    assert group_advantage([1.0, 1.0, 1.0]) == [0.0, 0.0, 0.0]
    assert group_advantage([1.0, -1.0], normalize_std=False) == [1.0, -1.0]
    with pytest.raises(InvalidGroup):
        group_advantage([1.0])


async def test_filters_recover_labels(labelled_batch):
    good, wrong, unpruned, gappy = labelled_batch
    grader = TwoLayerGrader()

    passed, report = await outcome_filter(list(labelled_batch), grader)
    assert passed == [good, unpruned, gappy]
    assert (report.total, report.outcome_pass) == (4, 3)

    assert prunes_in_time(good) and prunes_in_time(gappy)
    assert not prunes_in_time(unpruned)
    assert reads_complete_scan(good) and not reads_complete_scan(gappy)

    kept, process_report = process_filter(passed)
    assert kept == [good]
    assert process_report.process_pass == 1


async def test_aborted_trajectories_fail_outcome(config, corpus):
    aborted = await run_episode(
        config, ReplayPolicy([decide(None)] * 3), corpus, QUERY, golden_answer=FACT_VALUE
    )
    assert aborted.status == EpisodeStatus.PROTOCOL_ERROR
    passed, _ = await outcome_filter([aborted], TwoLayerGrader())
    assert passed == []


def test_filter_report_is_monotone():
    with pytest.raises(ValueError):
        FilterReport(total=2, outcome_pass=3)
    with pytest.raises(ValueError):
        FilterReport(samples_before_balance=1, samples_after_balance=2)


async def test_explode_samples_fidelity(config, linear_plan):
    tools = manifest_lines(config.tool_set)
    total_steps = 0
    total_samples = 0
    for seed in range(100):
        corpus = make_corpus(3, words_per_paragraph=300, seed=seed, fact_at=seed % 3)
        trajectory = await oracle_trajectory(config, corpus, linear_plan)
        samples = explode_samples(trajectory)
        total_steps += trajectory.rounds
        total_samples += len(samples)
        assert len(samples) == trajectory.rounds

        assistant_positions = [
            i for i, event in enumerate(trajectory.state_log)
            if event.op == "append" and event.payload["role"] == Role.ASSISTANT.value
        ]
        for sample, position in zip(samples, assistant_positions):
            prefix = replay_log(trajectory.state_log[:position], trajectory.query)
            assert sample.input_context == serialize(prefix, config.system_prompt, tools)
            for message in prefix.messages:
                if message.visibility == Visibility.STUBBED and "\"readChunk\"" in message.content.split("\n", 1)[0]:
                    body = message.content.split("\n", 1)[1]
                    assert body not in sample.input_context
            start, end = sample.loss_mask[0]
            assert sample.text.encode("utf-8")[start:end].decode("utf-8") == sample.target
            assert sample.target.startswith("<|assistant|>")
    assert total_samples == total_steps


async def test_explode_rejects_tampered_trajectory(config, corpus, linear_plan):
    trajectory = await oracle_trajectory(config, corpus, linear_plan)
    trajectory.events[2].observation.content = "tampered"
    with pytest.raises(ReplayMismatch):
        explode_samples(trajectory)


def _samples(counts):
    samples = []
    for action, count in counts.items():
        for i in range(count):
            samples.append(
                TrainingSample(
                    sample_id=f"{action}:{i}", source_trajectory_id="t", step_index=i,
                    primary_action=action, input_context="", target="x",
                )
            )
    return samples


def test_balance_caps_overrepresented_action():
    samples = _samples({"deleteContext": 70, "readChunk": 30})
    kept, report = balance_actions(samples, {"deleteContext": 0.4}, seed=3)

    share = report.after["deleteContext"] / len(kept)
    assert share <= 0.4 + 1e-12
    assert report.after["readChunk"] == 30
    assert report.before == {"deleteContext": 70, "readChunk": 30}
    assert len(kept) < len(samples)
    assert [s.sample_id for s in kept] == [s.sample_id for s in balance_actions(samples, {"deleteContext": 0.4}, seed=3)[0]]


def test_balance_is_identity_under_caps():
    samples = _samples({"deleteContext": 30, "readChunk": 70})
    kept, _ = balance_actions(samples, {"deleteContext": 0.4})
    assert kept == samples


async def test_rewards_from_trajectories(labelled_batch, config, corpus):
    good, wrong, _, _ = labelled_batch
    grader = TwoLayerGrader()
    assert (await compute_reward(good, grader)).reward == 1.0
    assert (await compute_reward(wrong, grader)).reward == -0.5
    assert (await compute_reward(good, grader, max_answer_length=3)).reward == -1.0

    exceeded = await run_episode(
        EpisodeConfig(rounds_budget=1, max_rounds=1), ReplayPolicy([decide("analyzeText")]), corpus, QUERY,
        golden_answer=FACT_VALUE,
    )
    record = await compute_reward(exceeded, grader)
    assert (record.reward, record.correctness, record.finished) == (-1.0, Correctness.NOT_APPLICABLE, False)


async def test_rl_batch_carries_group_advantages(labelled_batch):
    good, wrong, _, _ = labelled_batch
    batch = await build_rl_batch([good, wrong], TwoLayerGrader(), k=2, seed=0)

    assert len(batch) == 4
    by_trajectory = {sample.trajectory_id: sample.advantage for sample in batch}
    assert by_trajectory[good.trajectory_id] == pytest.approx(1.0)
    assert by_trajectory[wrong.trajectory_id] == pytest.approx(-1.0)
    assert all(sample.snapshot.masked_text() for sample in batch)


async def test_forge_dataset_funnel(labelled_batch):
    good = labelled_batch[0]
    result = await forge_dataset(list(labelled_batch), TwoLayerGrader())

    assert len(result.samples) == good.rounds
    report = result.reports[0]
    assert (report.total, report.outcome_pass, report.process_pass) == (4, 3, 1)
    assert report.samples_before_balance == report.samples_after_balance == good.rounds

    table = funnel_table(result.reports)
    assert list(table.columns) == FUNNEL_COLUMNS
    assert table.iloc[-1]["Source"] == "Total"
    assert table.iloc[-1]["Trajs"] == 4
    assert table.iloc[-1]["Process Filter"] == 1


async def test_forge_on_empty_input():
    result = await forge_dataset([], TwoLayerGrader())
    assert result.samples == []
    table = funnel_table(result.reports)
    assert table.iloc[-1]["Trajs"] == 0
