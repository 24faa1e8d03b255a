from datetime import timedelta

import pytest
import zlib
from hypothesis import given, settings, strategies as st

from wxpipe.records import (
    ChecksumMismatch, EmptyBatch, MalformedRecord, RawSample, SampleBatch,
    parse_batch, serialize_batch,
)

from conftest import T0, make_sample


def make_batch(n=3, seq=0, station="LC01"):
    return SampleBatch(station, seq, tuple(make_sample(i) for i in range(n)))


def test_minimal_batch_layout():
    enc = serialize_batch(make_batch(n=1)).decode()
    lines = enc.splitlines()
    assert len(lines) == 3
    assert lines[0] == "LCAWS,LC01,0,1"
    assert lines[1].startswith("2019-03-01T00:00:00Z,1013.25,22.50,61.00,")
    assert lines[2].startswith("CRC32,")
    assert enc.endswith("\n")


def test_round_trip_identity():
    batch = make_batch(n=5, seq=7)
    assert parse_batch(serialize_batch(batch)) == batch


def test_seq_changes_header_and_checksum_only():
    a = serialize_batch(make_batch(n=4, seq=1)).decode().splitlines()
    b = serialize_batch(make_batch(n=4, seq=2)).decode().splitlines()
    assert a[1:-1] == b[1:-1]          # record lines identical
    assert a[0] != b[0] and a[0].replace(",1,", ",2,") == b[0]
    assert a[-1] != b[-1]              # checksum follows the header change


def test_flipped_byte_is_checksum_mismatch():
    data = bytearray(serialize_batch(make_batch()))
    data[data.index(b"22.50")] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        parse_batch(bytes(data))


def _reencode_with_crc(lines: list[str]) -> bytes:
    payload = ("\n".join(lines) + "\n").encode()
    return payload + f"CRC32,{zlib.crc32(payload):08x}\n".encode()


def test_out_of_range_adc_is_malformed():
    lines = serialize_batch(make_batch(n=1)).decode().splitlines()[:-1]
    fields = lines[1].split(",")
    fields[6] = "300"
    lines[1] = ",".join(fields)
    with pytest.raises(MalformedRecord):
        parse_batch(_reencode_with_crc(lines))


def test_zero_records_is_empty_batch():
    with pytest.raises(EmptyBatch):
        parse_batch(_reencode_with_crc(["LCAWS,LC01,0,0"]))
    with pytest.raises(EmptyBatch):
        SampleBatch("LC01", 0, ())


def test_record_count_mismatch_is_malformed():
    lines = serialize_batch(make_batch(n=2)).decode().splitlines()[:-1]
    lines[0] = "LCAWS,LC01,0,3"
    with pytest.raises(MalformedRecord):
        parse_batch(_reencode_with_crc(lines))


def test_sample_validation():
    with pytest.raises(ValueError):
        make_sample(rh=130.0)
    with pytest.raises(ValueError):
        make_sample(rg=70000)
    with pytest.raises(ValueError):
        make_sample(wd=-1)
    with pytest.raises(ValueError):
        RawSample(1013.0, 20.0, 50.0, 0, 0, 0, 0, T0.replace(tzinfo=None))


def test_batch_ordering_validation():
    good = make_sample(0)
    later = make_sample(1)
    SampleBatch("LC01", 0, (good, later))
    with pytest.raises(ValueError):
        SampleBatch("LC01", 0, (later, good))
    stuck = RawSample(1013.0, 20.0, 50.0, 0, 0, 0, good.uptime_ms,
                      good.t_ts + timedelta(minutes=1))
    with pytest.raises(ValueError):
        SampleBatch("LC01", 0, (good, stuck))
    with pytest.raises(ValueError):
        SampleBatch("bad station", 0, (good,))


# two-decimal grid keeps the text form lossless
grid_float = st.integers(0, 200_000).map(lambda v: v / 100.0)

samples_strategy = st.integers(1, 20).flatmap(
    lambda n: st.tuples(
        st.lists(grid_float, min_size=n, max_size=n),
        st.lists(st.integers(-9000, 9000).map(lambda v: v / 100.0),
                 min_size=n, max_size=n),
        st.lists(st.integers(0, 10_000).map(lambda v: v / 100.0),
                 min_size=n, max_size=n),
        st.lists(st.integers(0, 0xFFFF), min_size=n, max_size=n),
        st.lists(st.integers(0, 0xFFFF), min_size=n, max_size=n),
        st.lists(st.integers(0, 0xFF), min_size=n, max_size=n),
    )
)


@st.composite
def batches(draw):
    ap, at, rh, rg, ws, wd = draw(samples_strategy)
    seq = draw(st.integers(0, 2**40))
    rows = tuple(
        RawSample(ap[i], at[i], rh[i], rg[i], ws[i], wd[i],
                  60_000 * (i + 1), T0 + timedelta(minutes=i))
        for i in range(len(ap))
    )
    return SampleBatch("LC-propty_0", seq, rows)


@given(batches())
@settings(max_examples=60, deadline=None)
def test_round_trip_property(batch):
    assert parse_batch(serialize_batch(batch)) == batch


@given(batches(), st.data())
@settings(max_examples=60, deadline=None)
def test_single_byte_corruption_detected(batch, data):
    enc = bytearray(serialize_batch(batch))
    payload_len = len(enc) - len(b"CRC32,xxxxxxxx\n")
    pos = data.draw(st.integers(0, payload_len - 1))
    flip = data.draw(st.integers(1, 255))
    enc[pos] ^= flip
    with pytest.raises((ChecksumMismatch, MalformedRecord)):
        parse_batch(bytes(enc))
