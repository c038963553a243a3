import random
import struct

import pytest

from pianodiff.midi import MidiError, MidiParseError, UnsupportedMidiError, parse_midi
from pianodiff.pianoroll import NoteEvent

from smf import off, on, smf, tempo, track


def test_single_note():
    data = smf([track([(0, tempo(500000)), (0, on(60)), (480, off(60))])])
    assert parse_midi(data) == [NoteEvent(60, 0.0, 0.5)]


def test_default_tempo_without_tempo_event():
    data = smf([track([(0, on(60)), (480, off(60))])])
    assert parse_midi(data) == [NoteEvent(60, 0.0, 0.5)]


def test_velocity_zero_is_note_off():
    data = smf([track([(0, on(60)), (480, on(60, vel=0))])])
    assert parse_midi(data) == [NoteEvent(60, 0.0, 0.5)]


def test_running_status():
    # second note-on and both note-offs (as vel-0 note-ons) reuse status 0x90
    events = [(0, on(60)), (0, bytes([64, 80])), (480, bytes([60, 0])), (480, bytes([64, 0]))]
    notes = parse_midi(smf([track(events)]))
    assert notes == [NoteEvent(60, 0.0, 0.5), NoteEvent(64, 0.0, 1.0)]


def test_overlapping_notes_fifo():
    events = [(0, on(60)), (240, on(60)), (240, off(60)), (480, off(60))]
    notes = parse_midi(smf([track(events)]))
    assert notes == [NoteEvent(60, 0.0, 0.5), NoteEvent(60, 0.25, 1.0)]


def test_unterminated_note_closed_at_end_of_track():
    events = [(0, on(60)), (960, b"\xff\x01\x01x")]
    assert parse_midi(smf([track(events)])) == [NoteEvent(60, 0.0, 1.0)]


def test_channels_are_paired_separately():
    events = [(0, on(60, ch=0)), (0, on(60, ch=1)), (480, off(60, ch=1)), (480, off(60, ch=0))]
    notes = parse_midi(smf([track(events)]))
    assert notes == [NoteEvent(60, 0.0, 0.5), NoteEvent(60, 0.0, 1.0)]


def test_tempo_change_mid_note_format1():
    conductor = track([(0, tempo(500000)), (480, tempo(250000))])
    notes = track([(0, on(60)), (960, off(60))])
    # first 480 ticks at 0.5 s/quarter, next 480 at 0.25 s/quarter
    assert parse_midi(smf([conductor, notes], fmt=1)) == [NoteEvent(60, 0.0, 0.75)]


def test_other_events_are_skipped():
    events = [(0, b"\xf0\x03\x01\x02\xf7"), (0, bytes([0xB0, 64, 127])), (0, bytes([0xC0, 5])),
              (0, on(60)), (10, bytes([0xE0, 0, 64])), (470, off(60))]
    assert parse_midi(smf([track(events)])) == [NoteEvent(60, 0.0, 0.5)]


def test_out_of_range_pitch_dropped():
    events = [(0, on(10)), (0, on(60)), (480, off(10)), (0, off(60))]
    assert parse_midi(smf([track(events)])) == [NoteEvent(60, 0.0, 0.5)]


def test_smpte_division_rejected():
    data = smf([track([])], division=0xE728)
    with pytest.raises(UnsupportedMidiError):
        parse_midi(data)


def test_format2_rejected():
    with pytest.raises(UnsupportedMidiError):
        parse_midi(smf([track([])], fmt=2))


def test_bad_header():
    with pytest.raises(MidiParseError) as e:
        parse_midi(b"RIFF" + bytes(20))
    assert e.value.offset == 0


def test_chunk_length_past_end_reports_offset():
    good = smf([track([(0, on(60)), (480, off(60))])])
    bad = good[:18] + struct.pack(">I", 9999) + good[22:]
    with pytest.raises(MidiParseError) as e:
        parse_midi(bad)
    assert e.value.offset == 18


def test_data_byte_without_status():
    with pytest.raises(MidiParseError):
        parse_midi(smf([track([(0, bytes([60, 64]))])]))


def test_fuzzed_corpus_never_crashes():
    rng = random.Random(0)
    base = [
        smf([track([(0, tempo(400000)), (0, on(60)), (100, on(62)), (380, off(60)), (0, off(62))])]),
        smf([track([(0, tempo(500000))]), track([(0, on(70)), (0, bytes([72, 50])), (960, bytes([70, 0]))])], fmt=1),
    ]
    for _ in range(2000):
        data = bytearray(rng.choice(base))
        for _ in range(rng.randint(1, 4)):
            op = rng.random()
            i = rng.randrange(len(data))
            if op < 0.5:
                data[i] = rng.randrange(256)
            elif op < 0.8:
                del data[i:]
                if not data:
                    break
            else:
                data.insert(i, rng.randrange(256))
        try:
            notes = parse_midi(bytes(data))
        except MidiError:
            continue
        assert all(isinstance(n, NoteEvent) for n in notes)
