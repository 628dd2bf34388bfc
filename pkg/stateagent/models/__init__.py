from .context import (
    STUB_TEMPLATE,
    CountingScheme,
    InteractionState,
    Message,
    Role,
    StateEvent,
    TokenCounter,
    Visibility,
)
from .tools import (
    DeleteMode,
    Notebook,
    NoteEntry,
    Observation,
    ObservationStatus,
    ToolCall,
    ToolName,
    ToolSet,
)
from .trajectory import EpisodeConfig, EpisodeStatus, ScanMode, Snapshot, Trajectory, TrajectoryEvent
from .training import (
    BalanceReport,
    Correctness,
    FilterReport,
    ProcessRules,
    RewardRecord,
    RLSample,
    TrainingSample,
)
from .bench import BenchGrid, GridRecord, NiahInstance, NiahManifest
from .corpus import Chunk, SearchHit
from .policy import NoteRule, OraclePlan, PolicyDecision, PolicyView, RemoteEndpoint, SamplingParams
from .manifest import RunManifest
from .settings import RunSettings
