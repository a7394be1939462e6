"""Real-time turn-taking piano duet: listen, take over, generate, hand back."""

from .backend import (
    Backend,
    BackendError,
    BadMarkError,
    CostModel,
    EmptyCacheError,
    MarkovBackend,
    SamplingParams,
    VocabularyMismatchError,
)
from .calibration import (
    CalibrationBucket,
    CalibrationError,
    CalibrationTable,
    IncompleteCalibrationError,
    flat_table,
    load_table,
    run_calibration,
    save_table,
)
from .clock import Clock, SystemClock, VirtualClock
from .engine import (
    DuetEngine,
    EngineConfig,
    EventLog,
    LogEntry,
    Phase,
    ReclaimFlush,
    SpeculativePolicy,
    TakeoverReport,
)
from .instrument import (
    AcousticEvent,
    AcousticKind,
    InstrumentModel,
    VirtualInstrument,
    export_acoustic_log,
    parse_acoustic_log,
)
from .midi import (
    EventKind,
    MidiEvent,
    Note,
    NoteTracker,
    Pedal,
    PedalEvent,
    SequencingError,
    TakeoverSignal,
    TrackerConfig,
    control,
    note_off,
    note_on,
)
from .scheduler import (
    BackpressureError,
    EventState,
    OutputScheduler,
    ScheduledEvent,
    SchedulerConfig,
    scan_retrigger_violations,
)
from .session import (
    LiveRunner,
    ReplayInvariantError,
    ReplayResult,
    SimSession,
    calibrate_virtual,
    replay_performance,
)
from .smf import SmfError, SmfSession, load_smf, save_smf
from .tokenizer import (
    Token,
    TokenError,
    TokenKind,
    TokenStructureError,
    TokenizerConfig,
    Vocabulary,
    detokenize,
    dump_tokens,
    parse_token_dump,
    quantize_performance,
    tokenize,
)

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendError",
    "BadMarkError",
    "CostModel",
    "EmptyCacheError",
    "MarkovBackend",
    "SamplingParams",
    "VocabularyMismatchError",
    "CalibrationBucket",
    "CalibrationError",
    "CalibrationTable",
    "IncompleteCalibrationError",
    "flat_table",
    "load_table",
    "run_calibration",
    "save_table",
    "Clock",
    "SystemClock",
    "VirtualClock",
    "DuetEngine",
    "EngineConfig",
    "EventLog",
    "LogEntry",
    "Phase",
    "ReclaimFlush",
    "SpeculativePolicy",
    "TakeoverReport",
    "AcousticEvent",
    "AcousticKind",
    "InstrumentModel",
    "VirtualInstrument",
    "export_acoustic_log",
    "parse_acoustic_log",
    "EventKind",
    "MidiEvent",
    "Note",
    "NoteTracker",
    "Pedal",
    "PedalEvent",
    "SequencingError",
    "TakeoverSignal",
    "TrackerConfig",
    "control",
    "note_off",
    "note_on",
    "BackpressureError",
    "EventState",
    "OutputScheduler",
    "ScheduledEvent",
    "SchedulerConfig",
    "scan_retrigger_violations",
    "LiveRunner",
    "ReplayInvariantError",
    "ReplayResult",
    "SimSession",
    "calibrate_virtual",
    "replay_performance",
    "SmfError",
    "SmfSession",
    "load_smf",
    "save_smf",
    "Token",
    "TokenError",
    "TokenKind",
    "TokenStructureError",
    "TokenizerConfig",
    "Vocabulary",
    "detokenize",
    "dump_tokens",
    "parse_token_dump",
    "quantize_performance",
    "tokenize",
    "__version__",
]
