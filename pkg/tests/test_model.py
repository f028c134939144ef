import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from gridfabric.model import (
    Address,
    EncodeError,
    FrameDecodeError,
    FrameReader,
    MalformedAddress,
    Message,
    MsgType,
    MAX_FRAME_BYTES,
    decode_frame,
    encode_frame,
    parse_address,
    aid,
    jid,
    nid,
)
from conftest import random_message


class TestAddress:
    def test_parse_examples(self):
        assert parse_address("AID2") == Address("AID", 2)
        assert parse_address("JID2") == Address("JID", 2)
        assert parse_address("DID5") == Address("DID", 5)

    @pytest.mark.parametrize("bad", ["XID1", "AID0", "AID-3", "AID", "aid1", "AID1.5",
                                     "AID01", "", "NID 3", "1AID", "AIDx"])
    def test_malformed(self, bad):
        with pytest.raises(MalformedAddress):
            parse_address(bad)

    def test_roundtrip_formatting(self, rng):
        for _ in range(500):
            kind = rng.choice(("AID", "FID", "UID", "DID", "GID", "JID", "NID"))
            n = rng.randint(1, 10**9)
            addr = Address(kind, n)
            assert parse_address(addr.token) == addr

    def test_total_order(self):
        assert aid(2) < aid(10)
        assert aid(999) < jid(1)  # kind precedes number
        ordered = sorted([nid(3), aid(7), jid(2), nid(1)])
        assert [a.token for a in ordered] == ["AID7", "JID2", "NID1", "NID3"]

    def test_invalid_construction(self):
        with pytest.raises(MalformedAddress):
            Address("ZID", 1)
        with pytest.raises(MalformedAddress):
            Address("AID", 0)
        with pytest.raises(MalformedAddress):
            Address("AID", True)


class TestFrameCodec:
    def test_roundtrip_simple_control(self):
        msg = Message(MsgType.CONTROL, jid(1), jid(2), "c-1",
                      {"nid": "NID3", "setting": {"name": "power", "value": "off"}})
        assert decode_frame(encode_frame(msg)) == msg

    def test_roundtrip_zero_price(self):
        msg = Message(MsgType.PRICE, jid(1), aid(2), "c-2",
                      {"price_per_kwh": 0.0, "effective_at_ms": 0})
        assert decode_frame(encode_frame(msg)) == msg

    def test_roundtrip_large_telemetry(self, rng):
        samples = [[f"NID{i+1}", "PowerW", rng.uniform(0, 3000), i * 1000] for i in range(100)]
        msg = Message(MsgType.TELEMETRY, Address("GID", 1), jid(10**6), "GID1-7",
                      {"batches": [{"seq": 1, "samples": samples, "omitted": []}]})
        assert decode_frame(encode_frame(msg)) == msg

    def test_encoding_deterministic(self, rng):
        for _ in range(50):
            msg = random_message(rng)
            assert encode_frame(msg) == encode_frame(msg)

    def test_seeded_roundtrip_many(self):
        rng = random.Random(99)
        for _ in range(2000):
            msg = random_message(rng)
            assert decode_frame(encode_frame(msg)) == msg

    @given(st.integers(min_value=0, max_value=2**32))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_property(self, seed):
        msg = random_message(random.Random(seed))
        assert decode_frame(encode_frame(msg)) == msg

    def test_oversize_frame_rejected(self):
        msg = Message(MsgType.TELEMETRY, jid(1), jid(2), "c-3", {"blob": "x" * MAX_FRAME_BYTES})
        with pytest.raises(EncodeError):
            encode_frame(msg)

    def test_nan_rejected(self):
        msg = Message(MsgType.PRICE, jid(1), aid(1), "c-4", {"price_per_kwh": float("nan")})
        with pytest.raises(EncodeError):
            encode_frame(msg)

    def test_unknown_schema_version_rejected(self):
        msg = Message(MsgType.PRICE, jid(1), aid(1), "c-5", {"price_per_kwh": 1.0})
        raw = json.loads(encode_frame(msg))
        raw["v"] = 2
        with pytest.raises(FrameDecodeError):
            decode_frame(json.dumps(raw).encode())

    def test_control_needs_exactly_one_nid_and_setting(self):
        bad_bodies = [
            {},
            {"nid": "NID1"},
            {"setting": {"name": "power", "value": "off"}},
            {"nid": "AID1", "setting": {"name": "power", "value": "off"}},
            {"nid": "NID1", "setting": {"name": "power"}},
            {"nid": "NID1", "setting": {"name": "power", "value": "off", "extra": 1}},
        ]
        for body in bad_bodies:
            msg = Message(MsgType.CONTROL, jid(1), jid(2), "c-6", body)
            with pytest.raises(EncodeError):
                encode_frame(msg)

    def test_hop_clamping_keeps_nondecreasing(self):
        msg = Message(MsgType.PRICE, jid(1), aid(1), "c-7", {})
        msg = msg.with_hop("a", 100).with_hop("b", 50)
        assert msg.hop_timestamps == (("a", 100), ("b", 100))

    def test_decoder_rejects_decreasing_hops(self):
        msg = Message(MsgType.PRICE, jid(1), aid(1), "c-8", {})
        raw = json.loads(encode_frame(msg))
        raw["hops"] = [["a", 100], ["b", 50]]
        with pytest.raises(FrameDecodeError):
            decode_frame(json.dumps(raw).encode())


class TestDecoderRobustness:
    """Any mutated byte stream must fail with FrameDecodeError, never crash."""

    def _assert_controlled(self, data: bytes):
        try:
            decode_frame(data)
        except FrameDecodeError:
            pass  # the only acceptable failure mode

    def test_mutated_frames(self):
        rng = random.Random(1234)
        for i in range(2000):
            base = bytearray(encode_frame(random_message(rng)).rstrip(b"\n"))
            op = rng.randrange(4)
            if op == 0 and base:
                base[rng.randrange(len(base))] = rng.randrange(256)
            elif op == 1:
                base.insert(rng.randint(0, len(base)), rng.randrange(256))
            elif op == 2 and base:
                del base[rng.randrange(len(base))]
            else:
                base = base[: rng.randint(0, len(base))]
            self._assert_controlled(bytes(base))

    def test_garbage_inputs(self):
        for data in [b"", b"\n", b"{}", b"[]", b"null", b"not json", b"\xff\xfe\x00",
                     b'{"v":1}', b'"just a string"', b"123"]:
            self._assert_controlled(data)

    def test_reader_splits_lines_and_limits_size(self):
        msg1, msg2 = (Message(MsgType.PRICE, jid(1), aid(1), f"c-{i}", {"price_per_kwh": i})
                      for i in (1, 2))
        stream = encode_frame(msg1) + encode_frame(msg2)
        reader = FrameReader()
        out = list(reader.feed(stream[:10]))
        out += list(reader.feed(stream[10:]))
        assert out == [msg1, msg2]
        with pytest.raises(FrameDecodeError):
            list(FrameReader().feed(b"x" * (MAX_FRAME_BYTES + 2)))
