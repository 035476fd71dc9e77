"""Class-conditioned sound-event selection and removal."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    InvalidArgumentError,
    NonFiniteLossError,
    ZeroReferenceError,
)
from .nets import (
    PitConfig,
    PitSeparator,
    SelectorConfig,
    SoundSelector,
    embed_classes,
    forward,
    frame_count,
    integrate,
    load_checkpoint,
    pit_forward,
    save_checkpoint,
)
from .pit import oracle_select, pit_loss
from .removal import remove_direct, remove_indirect, removal_reference
from .signal import (
    StemSet,
    Waveform,
    class_vector,
    log_mse_loss,
    mix_reference,
    sdr_improvement,
    si_sdr,
    snr_loss,
)

__version__ = "0.1.0"
