from __future__ import annotations

import hashlib
import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbench.manifest import (
    FeatureFormatError,
    FeatureGrid,
    ManifestError,
    SampleRecord,
    StageManifest,
    manifest_from_samples,
    parse_manifest,
    read_feature_file,
    serialize_manifest,
    write_feature_file,
)


def h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def golden_samples():
    return [
        SampleRecord("car-00000", "Car", h(b"raw-a"), h(b"feat-a")),
        SampleRecord("bus-00001", "Bus", h(b"raw-b"), h(b"feat-b")),
        SampleRecord("truck-00002", "Truck", h(b"raw-c"), h(b"feat-c")),
    ]


GOLDEN_SHA = "7caed4f1474e3cf6b567544c13f51e9d99e6465651fabd8bcbbb7ada9198fbaa"


def test_golden_annotation_manifest_bytes_and_digest():
    m = manifest_from_samples("annotation", golden_samples())
    data = serialize_manifest(m)
    expected = (
        "pbench/1 annotation\nprev -\n"
        f"bus-00001\tBus\t{h(b'raw-b').hex()}\t{h(b'feat-b').hex()}\n"
        f"car-00000\tCar\t{h(b'raw-a').hex()}\t{h(b'feat-a').hex()}\n"
        f"truck-00002\tTruck\t{h(b'raw-c').hex()}\t{h(b'feat-c').hex()}\n"
        "root -\n"
    ).encode()
    assert data == expected
    assert hashlib.sha256(data).hexdigest() == GOLDEN_SHA


def test_insertion_order_does_not_matter():
    a = manifest_from_samples("annotation", golden_samples())
    b = manifest_from_samples("annotation", list(reversed(golden_samples())))
    assert serialize_manifest(a) == serialize_manifest(b)


def test_empty_manifest_round_trip():
    m = StageManifest("annotation")
    data = serialize_manifest(m)
    assert data == b"pbench/1 annotation\nprev -\nroot -\n"
    assert parse_manifest(data) == m


def test_unsorted_records_name_the_line():
    good = serialize_manifest(manifest_from_samples("annotation", golden_samples())).decode().split("\n")
    good[2], good[3] = good[3], good[2]
    with pytest.raises(ManifestError, match="unsorted at line 4"):
        parse_manifest("\n".join(good).encode())


def test_short_digest_rejected_with_line_number():
    text = serialize_manifest(manifest_from_samples("annotation", golden_samples())).decode()
    lines = text.split("\n")
    fields = lines[3].split("\t")
    fields[2] = fields[2][:63]
    lines[3] = "\t".join(fields)
    with pytest.raises(ManifestError, match="line 4"):
        parse_manifest("\n".join(lines).encode())


def test_duplicate_id_rejected_on_serialize():
    s = golden_samples()
    m = StageManifest("annotation", (s[0].as_fields(), s[0].as_fields()))
    with pytest.raises(ManifestError, match="duplicate") as err:
        serialize_manifest(m)
    assert err.value.record_id == "car-00000"


def test_malformed_header_rejected():
    with pytest.raises(ManifestError, match="line 1"):
        parse_manifest(b"pbench/2 annotation\nprev -\nroot -\n")
    with pytest.raises(ManifestError):
        parse_manifest(b"pbench/1 annotation\nprev -\nroot -")  # no final LF


def test_ids_reject_control_characters():
    with pytest.raises(ManifestError):
        SampleRecord("bad\tid", "Car", h(b"a"), h(b"b"))


def test_root_only_on_rooted_stages():
    with pytest.raises(ManifestError):
        serialize_manifest(StageManifest("annotation", (), merkle_root=h(b"x")))
    assert parse_manifest(serialize_manifest(StageManifest("features", (), merkle_root=h(b"x")))).merkle_root == h(b"x")


ids = st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs", "Zl", "Zp")), min_size=1, max_size=12)
labels = st.sampled_from(["Car", "Tram", "Truck", "Bus", "Motorcycle", "Bicycle"])
digests = st.binary(min_size=32, max_size=32)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(ids, st.tuples(labels, digests, digests), max_size=8), st.one_of(st.none(), digests))
def test_round_trip_property(entries, prev):
    samples = [SampleRecord(k, lab, a, b) for k, (lab, a, b) in entries.items()]
    m = manifest_from_samples("features", samples, prev_manifest_hash=prev)
    data = serialize_manifest(m)
    back = parse_manifest(data)
    assert back == m
    assert serialize_manifest(back) == data


def test_single_field_mutations_change_the_hash():
    rng = random.Random(7)
    samples = [SampleRecord(f"s-{i:04d}", rng.choice(["Car", "Truck"]), h(b"r%d" % i), h(b"f%d" % i))
               for i in range(50)]
    base = manifest_from_samples("annotation", samples).digest()
    for _ in range(100):
        i = rng.randrange(50)
        s = samples[i]
        field = rng.choice(["label", "h_raw", "h_feat", "id"])
        if field == "label":
            new = SampleRecord(s.id, "Bus", s.h_raw, s.h_feat)
        elif field == "id":
            new = SampleRecord(s.id + "x", s.label, s.h_raw, s.h_feat)
        else:
            d = bytearray(getattr(s, field))
            d[rng.randrange(32)] ^= 1 << rng.randrange(8)
            new = SampleRecord(s.id, s.label, bytes(d) if field == "h_raw" else s.h_raw,
                               bytes(d) if field == "h_feat" else s.h_feat)
        mutated = samples[:i] + [new] + samples[i + 1:]
        assert manifest_from_samples("annotation", mutated).digest() != base


# -- feature files -----------------------------------------------------------

def test_one_by_one_feature_file_layout():
    data = write_feature_file(FeatureGrid(np.zeros((1, 1), np.float32)))
    # 4-byte magic + two u16 dims + one f32
    assert data == b"FGRD" + struct.pack("<HHf", 1, 1, 0.0)
    assert len(data) == 12
    assert hashlib.sha256(data).hexdigest() == "5bdaead0afed4f036b9cc753c504fd76553159c3564239190646ab2dccc0fc2d"


def test_feature_round_trip_is_bit_exact():
    rng = np.random.default_rng(3)
    g = FeatureGrid(rng.random((16, 16), dtype=np.float32))
    back = read_feature_file(write_feature_file(g))
    assert back.values.tobytes() == g.values.tobytes()
    assert back == g


def test_one_value_change_changes_digest():
    v = np.full((4, 4), 0.5, np.float32)
    w = v.copy()
    w[2, 3] = np.nextafter(np.float32(0.5), np.float32(1))
    assert h(write_feature_file(FeatureGrid(v))) != h(write_feature_file(FeatureGrid(w)))


@pytest.mark.parametrize("data,msg", [
    (b"XXXX" + struct.pack("<HHf", 1, 1, 0.0), "magic"),
    (b"FGRD" + struct.pack("<HH", 2, 2) + b"\0" * 12, "payload"),
    (b"FGRD" + struct.pack("<HHf", 1, 1, float("nan")), "non-finite"),
])
def test_bad_feature_files_rejected(data, msg):
    with pytest.raises(FeatureFormatError, match=msg):
        read_feature_file(data)


def test_grid_rejects_out_of_range_and_clamped_fixes_it():
    with pytest.raises(FeatureFormatError):
        FeatureGrid(np.array([[1.5]], np.float32))
    assert FeatureGrid.clamped(np.array([[1.5, -0.2]])).values.tolist() == [[1.0, 0.0]]
