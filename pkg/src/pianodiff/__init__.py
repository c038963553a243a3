"""Discrete mask-and-replace diffusion for multi-state piano-roll transcription."""
from .pianoroll import (MultiStateRoll, NoteEvent, NoteState, decode_notes,
                        encode_roll, read_notes_csv, render_roll, write_notes_csv)
from .schedule import (MaskReplaceSchedule, ScheduleKind, absorbing_view,
                       build_schedule, cumulative_apply, cumulative_matrix,
                       transition_matrix)

__version__ = "0.1.0"
