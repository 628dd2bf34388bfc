import asyncio
import logging
import math
import re
import string
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .. import __version__
from ..models.bench import BenchGrid, GridRecord, NiahInstance, NiahManifest, format_length
from ..models.context import TokenCounter
from ..models.policy import NoteRule, OraclePlan
from ..models.tools import DeleteMode, ToolSet
from ..models.trajectory import EpisodeConfig, ScanMode, Trajectory
from ..models.training import Correctness
from .corpus_index import IndexCache
from .engine import run_episode
from .grading import contains_answer
from .policy import Policy

logger = logging.getLogger(__name__)

NEEDLE_TEMPLATE = "The special magic number for {key} is {value}."
QUERY_TEMPLATE = "What is the special magic number for {key} mentioned in the provided text?"
LENGTH_TOLERANCE = 0.01
GRID_CHUNK_SIZE = 12000

_NAMES = [
    "Avery", "Blake", "Casey", "Dana", "Emery", "Finley", "Harper", "Jordan", "Kendall", "Logan",
    "Morgan", "Parker", "Quinn", "Reese", "Rowan", "Sawyer", "Taylor", "Wren",
]
_PLACES = [
    "the harbor", "the old mill", "the valley", "the market square", "the library", "the northern ridge",
    "the river bend", "the orchard", "the observatory", "the station", "the greenhouse", "the quarry",
]
_THINGS = [
    "lanterns", "maps", "baskets", "letters", "tools", "notebooks", "seeds", "ropes", "barrels",
    "blankets", "clocks", "kettles", "sketches", "stones",
]
_ADJECTIVES = [
    "quiet", "busy", "careful", "patient", "curious", "steady", "gentle", "bright", "modest", "weathered",
]
_TEMPLATES = [
    "{name} walked to {place} early in the morning and counted {n} {things} along the way.",
    "Most afternoons at {place} were {adj}, and {name} preferred it that way.",
    "According to the ledger kept by {name}, {place} received {n} crates of {things} that season.",
    "It is often said that {adj} work at {place} pays off slowly but reliably.",
    "{name} once spent {n} days repairing {things} before the weather turned.",
    "The path from {place} to the hills was {adj} and lined with old {things}.",
    "Nobody at {place} could remember a year with more than {n} visitors.",
    "{name} wrote that a {adj} mind notices the small details other people miss.",
    "By evening the {things} near {place} had been sorted into {n} neat rows.",
    "Travelers described {place} as {adj}, though {name} disagreed with that view.",
    "A shipment of {n} {things} arrived late, so {name} waited at {place} until dusk.",
    "The records from {place} mention {name} only once, in a note about {things}.",
    "Some of the {things} stored at {place} were older than anyone living there.",
    "{name} believed that {n} good habits matter more than one {adj} idea.",
    "When the bells rang at {place}, the {adj} crowd slowly made its way home.",
    "Every spring {name} counted the {things} again and usually found {n} of them.",
]
_ALPHABET = np.array(list(string.ascii_lowercase + string.digits))


class HaystackGenerator:
    """Seeded filler prose: neutral sentences with varied identifiers, 4-8 per paragraph."""

    def __init__(self, seed: int, batch: int = 2048):
        self.rng = np.random.default_rng(seed)
        self.batch = batch
        self._buffer: List[str] = []

    def _refill(self) -> None:
        size = self.batch
        templates = self.rng.integers(len(_TEMPLATES), size=size)
        names = self.rng.integers(len(_NAMES), size=size)
        places = self.rng.integers(len(_PLACES), size=size)
        things = self.rng.integers(len(_THINGS), size=size)
        adjectives = self.rng.integers(len(_ADJECTIVES), size=size)
        numbers = self.rng.integers(2, 999, size=size)
        self._buffer = [
            _TEMPLATES[t].format(
                name=_NAMES[a], place=_PLACES[p], things=_THINGS[h], adj=_ADJECTIVES[j], n=int(n)
            )
            for t, a, p, h, j, n in zip(templates, names, places, things, adjectives, numbers)
        ]
        self._buffer.reverse()

    def sentence(self) -> str:
        if not self._buffer:
            self._refill()
        return self._buffer.pop()

    def paragraph_length(self) -> int:
        return int(self.rng.integers(4, 9))

    def token(self, length: int = 8) -> str:
        # at least one digit, so it can never collide with filler words
        while True:
            chars = self.rng.choice(_ALPHABET, size=length)
            value = "".join(chars)
            if any(ch.isdigit() for ch in value) and any(ch.isalpha() for ch in value):
                return value


def _assemble(sentences: Sequence[str], breaks: Sequence[int]) -> Tuple[str, List[int]]:
    """Join sentences into paragraphs; returns text and each sentence's start offset."""
    parts: List[str] = []
    starts: List[int] = []
    offset = 0
    break_set = set(breaks)
    for i, sentence in enumerate(sentences):
        if i:
            separator = "\n\n" if i in break_set else " "
            parts.append(separator)
            offset += len(separator)
        starts.append(offset)
        parts.append(sentence)
        offset += len(sentence)
    return "".join(parts), starts


def generate_instance(
    target_length: int,
    position: float,
    seed: int,
    counter: Optional[TokenCounter] = None,
    instance_id: Optional[str] = None,
) -> NiahInstance:
    if not 0.0 <= position <= 1.0:
        raise ValueError(f"position must be in [0, 1], got {position}")
    counter = counter or TokenCounter()
    generator = HaystackGenerator(seed)
    key = generator.token()
    value = generator.token()
    while value == key:
        value = generator.token()
    needle = NEEDLE_TEMPLATE.format(key=key, value=value)

    sentences: List[str] = []
    breaks: List[int] = []
    next_break = generator.paragraph_length()
    budget = target_length - counter.count(needle)
    running = 0

    def add_sentence() -> int:
        nonlocal next_break
        if len(sentences) == next_break:
            breaks.append(len(sentences))
            next_break += generator.paragraph_length()
        sentence = generator.sentence()
        sentences.append(sentence)
        return counter.count(sentence)

    while running < budget:
        running += add_sentence()

    # the per-sentence sum is an estimate; fix up against the real count
    low, high = target_length * (1 - LENGTH_TOLERANCE), target_length * (1 + LENGTH_TOLERANCE)
    for _ in range(64):
        filler, _ = _assemble(sentences, breaks)
        total = counter.count(filler) + counter.count(needle)
        if low <= total <= high:
            break
        if total > high and len(sentences) > 1:
            drop = max(1, int((total - target_length) / max(1, total / len(sentences))))
            del sentences[-drop:]
            breaks[:] = [b for b in breaks if b < len(sentences)]
        else:
            missing = target_length - total
            added = 0
            while added < missing:
                added += add_sentence()

    # insert at the sentence boundary closest to the requested fraction of the text
    filler, starts = _assemble(sentences, breaks)
    boundaries = starts + [len(filler)]
    index = int(np.argmin(np.abs(np.asarray(boundaries) - position * len(filler))))
    sentences.insert(index, needle)
    breaks = [b + 1 if b > index else b for b in breaks]
    haystack, _ = _assemble(sentences, breaks)

    if haystack.count(value) != 1 or haystack.count(needle) != 1:
        raise RuntimeError("needle value is not unique in the generated haystack")

    return NiahInstance(
        instance_id=instance_id or f"niah-{format_length(target_length)}-{seed}",
        haystack=haystack,
        needle_key=key,
        needle_value=value,
        insertion_position=position,
        query=QUERY_TEMPLATE.format(key=key),
        target_length=target_length,
        token_count=counter.count(haystack),
        seed=seed,
    )


def grade(answer: Optional[str], instance: NiahInstance) -> Correctness:
    return Correctness.CORRECT if contains_answer(answer, instance.needle_value) else Correctness.INCORRECT


def instance_seed(grid_seed: int, length: int, index: int) -> int:
    return int(np.random.SeedSequence([grid_seed, length, index]).generate_state(1)[0])


def generate_grid(grid: BenchGrid, counter: Optional[TokenCounter] = None) -> List[NiahInstance]:
    instances = []
    for length in grid.lengths:
        positions = np.linspace(0.0, 1.0, grid.instances_per_cell)
        for index, position in enumerate(positions):
            instances.append(
                generate_instance(
                    length,
                    float(position),
                    instance_seed(grid.seed, length, index),
                    counter=counter,
                    instance_id=f"niah-{format_length(length)}-{index:03d}",
                )
            )
        logger.info("generated %d instances at %s", grid.instances_per_cell, format_length(length))
    return instances


def write_instances(instances: Sequence[NiahInstance], grid: BenchGrid, directory: Path, counter_scheme: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for instance in instances:
        name = f"{instance.instance_id}.json"
        (directory / name).write_text(instance.model_dump_json(), encoding="utf-8")
        files.append(name)
    manifest = NiahManifest(grid=grid, instance_files=files, counter_scheme=counter_scheme, version=__version__)
    path = directory / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_instances(manifest_path: Path) -> Tuple[NiahManifest, List[NiahInstance]]:
    manifest_path = Path(manifest_path)
    manifest = NiahManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    instances = [
        NiahInstance.model_validate_json((manifest_path.parent / name).read_text(encoding="utf-8"))
        for name in manifest.instance_files
    ]
    return manifest, instances


def niah_plan(instance: NiahInstance, chunk_size: int = GRID_CHUNK_SIZE, strategy: ScanMode = ScanMode.LINEAR_SCAN) -> OraclePlan:
    key = instance.needle_key
    rule = NoteRule(key=key, pattern=rf"The special magic number for {re.escape(key)} is (?P<value>[A-Za-z0-9]+)\.")
    return OraclePlan(strategy=strategy, target_keys=[key], note_schedule=[rule], chunk_size=chunk_size)


def grid_episode_config(base: EpisodeConfig, instance: NiahInstance, chunk_size: int = GRID_CHUNK_SIZE) -> EpisodeConfig:
    """No search, tool-call-only pruning, and a round budget that fits one read+delete per chunk."""
    chunks = math.ceil(max(instance.token_count, 1) / chunk_size)
    rounds_budget = max(base.rounds_budget, 2 * chunks + 20)
    return base.model_copy(
        update={
            "tool_set": ToolSet.without_search(DeleteMode.TOOLCALLS_ONLY),
            "rounds_budget": rounds_budget,
            "max_rounds": max(base.max_rounds, rounds_budget + 50),
            "record_snapshots": False,
        }
    )


PolicyFactory = Callable[[NiahInstance, EpisodeConfig], Policy]


async def run_grid(
    instances: Sequence[NiahInstance],
    policies: Dict[str, PolicyFactory],
    base_config: EpisodeConfig,
    repeats: int = 1,
    jobs: int = 4,
    chunk_size: int = GRID_CHUNK_SIZE,
    index_cache: Optional[IndexCache] = None,
    on_trajectory: Optional[Callable[[str, Trajectory], None]] = None,
) -> List[GridRecord]:
    """Every (policy, instance, repeat) cell as an independent episode; statuses other than finished grade incorrect."""
    semaphore = asyncio.Semaphore(jobs)
    cache = index_cache or IndexCache()

    async def run_cell(policy_name: str, factory: PolicyFactory, instance: NiahInstance, repeat: int) -> GridRecord:
        async with semaphore:
            config = grid_episode_config(base_config, instance, chunk_size)
            trajectory = await run_episode(
                config,
                factory(instance, config),
                instance.haystack,
                instance.query,
                golden_answer=instance.needle_value,
                tag=instance.label,
                index_cache=cache,
            )
        if on_trajectory is not None:
            on_trajectory(policy_name, trajectory)
        correct = trajectory.finished and grade(trajectory.final_answer, instance) == Correctness.CORRECT
        return GridRecord(
            policy=policy_name,
            instance_id=instance.instance_id,
            target_length=instance.target_length,
            position=instance.insertion_position,
            repeat=repeat,
            correct=correct,
            status=trajectory.status.value,
            rounds=trajectory.rounds,
            peak_tokens=max(trajectory.token_trace),
            transport_error=trajectory.transport_error,
        )

    cells = [
        run_cell(name, factory, instance, repeat)
        for name, factory in policies.items()
        for repeat in range(repeats)
        for instance in instances
    ]
    return list(await asyncio.gather(*cells))


def accuracy_table(records: Sequence[GridRecord]) -> pd.DataFrame:
    """Accuracy (%) per policy (rows) and context length (columns, ascending)."""
    frame = pd.DataFrame([record.model_dump() for record in records])
    if frame.empty:
        return pd.DataFrame()
    table = frame.pivot_table(index="policy", columns="target_length", values="correct", aggfunc="mean") * 100.0
    table = table.reindex(columns=sorted(table.columns))
    table.columns = [format_length(int(length)) for length in table.columns]
    table.index.name = "Policy"
    return table.round(1)


def position_table(records: Sequence[GridRecord], buckets: int = 5) -> pd.DataFrame:
    """Accuracy (%) per policy and needle-position bucket."""
    frame = pd.DataFrame([record.model_dump() for record in records])
    if frame.empty:
        return pd.DataFrame()
    edges = np.linspace(0.0, 1.0, buckets + 1)
    labels = [f"{edges[i]:.1f}-{edges[i + 1]:.1f}" for i in range(buckets)]
    frame["bucket"] = [labels[min(int(p * buckets), buckets - 1)] for p in frame["position"]]
    table = frame.pivot_table(index="policy", columns="bucket", values="correct", aggfunc="mean") * 100.0
    table = table.reindex(columns=[label for label in labels if label in table.columns])
    table.index.name = "Policy"
    return table.round(1)
