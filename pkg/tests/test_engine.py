import pytest

from stateagent.errors import EpisodeClosed
from stateagent.models.context import Role
from stateagent.models.policy import PolicyDecision
from stateagent.models.tools import DeleteMode, ToolName, ToolSet
from stateagent.models.trajectory import EpisodeConfig, EpisodeStatus, Trajectory
from stateagent.services.corpus_index import IndexCache
from stateagent.services.engine import Episode, capture_snapshots, replay_trajectory, run_episode, run_episodes
from stateagent.services.niah import generate_instance, niah_plan
from stateagent.services.oracle import OraclePolicy
from stateagent.services.policy import ReplayPolicy

from .conftest import FACT_VALUE, UnreachablePolicy, make_corpus

QUERY = "What is the vault code?"


def decide(tool=None, thought="", **arguments):
    return PolicyDecision(thought=thought, tool_name=tool, arguments=arguments)


def delete_rounds(trajectory):
    return [event.round for event in trajectory.events_for(ToolName.DELETE_CONTEXT)]


async def test_linear_oracle_finishes_with_sawtooth(config, corpus, linear_plan):
    trajectory = await run_episode(config, OraclePolicy(linear_plan, config.tool_set), corpus, QUERY, golden_answer=FACT_VALUE)

    assert trajectory.status == EpisodeStatus.FINISHED
    assert trajectory.final_answer == FACT_VALUE
    assert trajectory.rounds == 12
    assert len(trajectory.token_trace) == trajectory.rounds + 1
    assert max(trajectory.token_trace) < config.token_budget
    for r in delete_rounds(trajectory):
        assert trajectory.token_trace[r] < trajectory.token_trace[r - 1]
    assert len(trajectory.events_for(ToolName.READ_CHUNK)) == 4


async def test_search_oracle_reads_only_hits(config, corpus, search_plan):
    trajectory = await run_episode(config, OraclePolicy(search_plan, config.tool_set), corpus, QUERY)

    assert trajectory.finished
    assert trajectory.final_answer == FACT_VALUE
    assert len(trajectory.events_for(ToolName.SEARCH_ENGINE)) == 1
    assert [e.arguments["chunk_id"] for e in trajectory.events_for(ToolName.READ_CHUNK)] == [2]


async def test_budget_exceeded(corpus):
    probe = Episode(EpisodeConfig(), corpus, QUERY)
    probe_trajectory = await probe.run(ReplayPolicy([decide("finish", answer="")]))
    budget = probe_trajectory.token_trace[0] + 200
    config = EpisodeConfig(token_budget=budget)

    trajectory = await run_episode(
        config,
        ReplayPolicy([decide("buildIndex", chunk_size=512), decide("readChunk", chunk_id=0), decide("finish", answer="x")]),
        corpus,
        QUERY,
    )
    assert trajectory.status == EpisodeStatus.BUDGET_EXCEEDED
    assert trajectory.rounds == 2
    assert trajectory.final_answer is None


async def test_rounds_exceeded(corpus):
    config = EpisodeConfig(rounds_budget=3, max_rounds=3)
    trajectory = await run_episode(config, ReplayPolicy([decide("checkBudget")] * 10), corpus, QUERY)
    assert trajectory.status == EpisodeStatus.ROUNDS_EXCEEDED
    assert trajectory.rounds == 3


async def test_three_malformed_rounds_abort(config, corpus):
    trajectory = await run_episode(config, ReplayPolicy([decide(thought="thinking")] * 3), corpus, QUERY)
    assert trajectory.status == EpisodeStatus.PROTOCOL_ERROR
    assert all(event.malformed for event in trajectory.events)
    assert trajectory.events[0].feedback.startswith("Protocol error: the reply contained no tool call")


async def test_valid_action_resets_malformed_streak(config, corpus):
    decisions = [
        decide(thought="a"),
        decide("teleport"),
        decide("analyzeText"),
        decide("readChunk", chunk_id="x"),
        decide(thought="b"),
        decide("finish", answer="done"),
    ]
    trajectory = await run_episode(config, ReplayPolicy(decisions), corpus, QUERY)
    assert trajectory.status == EpisodeStatus.FINISHED
    assert "unknown tool 'teleport'" in trajectory.events[1].feedback
    assert trajectory.events[3].observation.error_code == "InvalidArguments"


async def test_invalid_arguments_count_towards_protocol_errors(config, corpus):
    trajectory = await run_episode(config, ReplayPolicy([decide("readChunk", chunk_id="x")] * 3), corpus, QUERY)
    assert trajectory.status == EpisodeStatus.PROTOCOL_ERROR


async def test_feedback_is_a_user_message(config, corpus):
    episode = Episode(config, corpus, QUERY)
    await episode.run(ReplayPolicy([decide(thought="hmm"), decide("finish", answer="")]))
    roles = [message.role for message in episode.state.messages]
    assert roles == [Role.USER, Role.ASSISTANT, Role.USER, Role.ASSISTANT]


async def test_step_after_close_raises(config, corpus):
    episode = Episode(config, corpus, QUERY)
    await episode.run(ReplayPolicy([decide("finish", answer="")]))
    with pytest.raises(EpisodeClosed):
        episode.step(decide("analyzeText"))


def test_empty_query_rejected(config, corpus):
    with pytest.raises(ValueError):
        Episode(config, corpus, "   ")


async def test_snapshots_at_delete_actions(config, corpus, linear_plan):
    trajectory = await run_episode(config, OraclePolicy(linear_plan, config.tool_set), corpus, QUERY)

    assert [snapshot.round for snapshot in trajectory.snapshots] == delete_rounds(trajectory)
    for snapshot in trajectory.snapshots:
        masked = snapshot.masked_text()
        assert masked.startswith(f"<|assistant|> [msg {snapshot.msg_id}]")
        assert "deleteContext" in masked
        assert snapshot.serialized_state.endswith(masked)

    picked = capture_snapshots(trajectory, 2, seed=1)
    assert len(picked) == 2
    assert picked == capture_snapshots(trajectory, 2, seed=1)
    assert [s.round for s in picked] == sorted(s.round for s in picked)
    assert capture_snapshots(trajectory, 99) == trajectory.snapshots


async def test_snapshots_can_be_disabled(corpus, linear_plan):
    config = EpisodeConfig(record_snapshots=False)
    trajectory = await run_episode(config, OraclePolicy(linear_plan, config.tool_set), corpus, QUERY)
    assert trajectory.snapshots == []


async def test_replay_is_byte_exact(config, corpus, linear_plan):
    trajectory = await run_episode(config, OraclePolicy(linear_plan, config.tool_set), corpus, QUERY)
    reloaded = Trajectory.model_validate_json(trajectory.model_dump_json())

    report = await replay_trajectory(reloaded, corpus)
    assert report.matched, report.mismatch
    assert report.rounds_compared == trajectory.rounds
    assert report.final_context_sha256 == trajectory.final_context_sha256


async def test_replay_detects_other_corpus(config, corpus, linear_plan):
    trajectory = await run_episode(config, OraclePolicy(linear_plan, config.tool_set), corpus, QUERY)
    report = await replay_trajectory(trajectory, make_corpus(4, seed=99))
    assert not report.matched
    assert "corpus" in report.mismatch


async def test_replay_of_aborted_episode(config, corpus):
    trajectory = await run_episode(config, ReplayPolicy([decide(thought="x")] * 3), corpus, QUERY)
    report = await replay_trajectory(trajectory, corpus)
    assert report.matched
    assert report.status == EpisodeStatus.PROTOCOL_ERROR


async def test_parallel_episodes_keep_job_order(config, linear_plan):
    corpora = [make_corpus(3, seed=i, fact_at=i % 3) for i in range(5)]
    jobs = [{"config": config, "corpus": c, "query": QUERY, "tag": f"job{i}"} for i, c in enumerate(corpora)]
    cache = IndexCache()

    trajectories = await run_episodes(jobs, lambda job: OraclePolicy(linear_plan, config.tool_set), 2, cache)

    assert [t.tag for t in trajectories] == [f"job{i}" for i in range(5)]
    assert all(t.final_answer == FACT_VALUE for t in trajectories)
    assert cache.misses == 5



async def test_transport_failure_closes_the_episode(config, corpus):
    trajectory = await run_episode(config, UnreachablePolicy(), corpus, QUERY, golden_answer=FACT_VALUE)

    assert trajectory.status == EpisodeStatus.PROTOCOL_ERROR
    assert "HTTP 503" in trajectory.transport_error
    assert trajectory.final_answer is None
    assert trajectory.rounds == 0
    assert trajectory.final_context_sha256


async def test_transport_failure_keeps_the_rest_of_the_batch(config, corpus, linear_plan):
    jobs = [{"config": config, "corpus": corpus, "query": QUERY, "tag": f"job{i}"} for i in range(3)]

    def factory(job):
        if job["tag"] == "job1":
            return UnreachablePolicy([decide("analyzeText"), decide("buildIndex", chunk_size=512)])
        return OraclePolicy(linear_plan, config.tool_set)

    trajectories = await run_episodes(jobs, factory, max_concurrency=3)

    assert [t.finished for t in trajectories] == [True, False, True]
    down = trajectories[1]
    assert down.rounds == 2
    assert down.transport_error is not None

    report = await replay_trajectory(down, corpus)
    assert report.matched
    assert report.status == EpisodeStatus.PROTOCOL_ERROR

@pytest.mark.slow
async def test_sawtooth_over_two_million_tokens():
    instance = generate_instance(2_000_000, 0.5, seed=11)
    config = EpisodeConfig(
        token_budget=32000,
        rounds_budget=400,
        max_rounds=450,
        tool_set=ToolSet(deletion_mode=DeleteMode.FULL),
        record_snapshots=False,
    )
    trajectory = await run_episode(
        config, OraclePolicy(niah_plan(instance), config.tool_set), instance.haystack, instance.query
    )

    assert trajectory.status == EpisodeStatus.FINISHED
    assert trajectory.final_answer == instance.needle_value
    assert max(trajectory.token_trace) < 32000
    for r in delete_rounds(trajectory):
        assert trajectory.token_trace[r] < trajectory.token_trace[r - 1]
