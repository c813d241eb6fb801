"""chronoflow: time-aware dataflow pipelines with reproducible fusion and replayable stores."""

from . import operators
from .components import Burst, Collector, Generator, Sequence
from .dataset import Dataset, DatasetError, Session
from .diagnostics import (
    DEFAULT_LATENCY_THRESHOLD,
    DEFAULT_SNAPSHOT_INTERVAL,
    DIAGNOSTICS_STREAM,
    DiagnosticsRecorder,
    EdgeMetrics,
    PipelineGraphSnapshot,
    export_dot,
    record_delivery,
    snapshot,
)
from .graph import (
    Component,
    CompletionReport,
    Composite,
    DuplicateName,
    Emitter,
    FinalizationTimeout,
    GraphError,
    InnerAlreadyStarted,
    Pipeline,
    PipelineAlreadyStarted,
    PipelineState,
    Receiver,
    Source,
    TypeMismatch,
    ValidationFailed,
    encapsulate,
)
from .interpolation import (
    INSUFFICIENT,
    NO_MATCH,
    Exact,
    JoinState,
    LastBefore,
    Match,
    Nearest,
    interpolate,
    parse_interpolator,
)
from .operators import ByCount, ByTime
from .scheduler import (
    ClosedEdge,
    LatencyConstrained,
    LatestMessage,
    PipelineStopped,
    PostResult,
    QueueSize,
    SchedulerConfig,
    Throttle,
    Unlimited,
)
from .store import (
    CODECS,
    CorruptFrame,
    CorruptStore,
    OverlappingRanges,
    ReplaySource,
    SchemaMismatch,
    StoreError,
    StoreReader,
    StoreSink,
    StoreWriter,
    StreamClosed,
    UnknownStream,
    concat,
    crop,
)
from .temporal import (
    MAX_SPEED,
    Clock,
    ClockMode,
    Envelope,
    EnvelopeViolation,
    ManualClock,
    ReplayDescriptor,
    TimeOverflow,
    UnsupportedMode,
    Violation,
    ViolationKind,
    check_envelope,
    format_timestamp,
    millis,
    parse_duration,
    parse_timestamp,
    seconds,
    validate_envelope,
    virtual_now,
)

__version__ = "0.1.0"
