import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from assocpim.ap_core import DOWN, LONG, SHORT, UP, ApContractError, ApState, CycleCounters, KeyMask, create_ap


def seeded(rows):
    """AP whose row i holds the bit string rows[i] (MSB first, like the examples)."""
    width = len(rows[0])
    ap = ApState(len(rows), width)
    for i, r in enumerate(rows):
        ap._cols[:, i] = [int(c) for c in reversed(r)]
    return ap


def km(width, pattern):
    """Pattern string MSB first; 'x' = masked out."""
    bits = {width - 1 - i: int(c) for i, c in enumerate(pattern) if c != "x"}
    return KeyMask.from_columns(width, bits)


def tags(ap):
    return "".join(str(int(t)) for t in ap.tag)


class TestCreate:
    def test_initial_state(self):
        ap = create_ap(4, 8, 16)
        assert ap.bits.shape == (4, 8)
        assert not ap.bits.any() and not ap.tag.any()
        assert ap.cycles == 0

    def test_minimal(self):
        ap = create_ap(1, 1, 2)
        assert (ap.depth, ap.width, ap.long_step) == (1, 1, 2)

    @pytest.mark.parametrize("args", [(0, 8, 16), (4, 0, 16), (4, 8, 3), (4, 8, 1), (-1, 2, 2)])
    def test_invalid_geometry(self, args):
        with pytest.raises(ApContractError):
            create_ap(*args)


class TestCompare:
    def test_shared_prefix(self):
        ap = seeded(["0101", "0110", "0111"])
        ap.compare(km(4, "01xx"))
        assert tags(ap) == "111"
        assert ap.cycles == 1

    def test_full_mask(self):
        ap = seeded(["0101", "0110"])
        ap.compare(km(4, "0101"))
        assert tags(ap) == "10"

    def test_empty_mask_tags_all(self):
        ap = seeded(["0101", "1110", "0000"])
        ap.compare(KeyMask.empty(4))
        assert tags(ap) == "111"

    def test_width_mismatch(self):
        ap = seeded(["01"])
        with pytest.raises(ApContractError):
            ap.compare(KeyMask.empty(3))

    def test_masked_key_bits_canonical(self):
        a = KeyMask(np.array([1, 1, 0], bool), np.array([0, 1, 1], bool))
        assert a.key.tolist() == [False, True, False]


class TestWrite:
    def test_only_tagged_rows(self):
        ap = seeded(["0000", "0000"])
        ap.tag[:] = [True, False]
        ap.write(km(4, "1xxx"))
        assert ap.bits[:, 3].tolist() == [True, False]
        assert ap.cycles == 1

    def test_empty_tag_still_costs(self):
        ap = seeded(["0000", "0000"])
        ap.write(km(4, "1111"))
        assert not ap.bits.any() and ap.cycles == 1

    def test_empty_mask_no_change(self):
        ap = seeded(["0101", "1010"])
        ap.tag[:] = True
        before = ap.bits.copy()
        ap.write(KeyMask.empty(4))
        assert np.array_equal(ap.bits, before) and ap.cycles == 1


class TestCompareWrite:
    def test_tagged_rows_written(self):
        ap = seeded(["000000", "000001", "000000", "000001"])
        ap.compare_write(km(6, "xxxxx1"), km(6, "1xxxxx"))
        assert ap.bits[:, 5].tolist() == [False, True, False, True]
        assert ap.cycles == 1

    def test_clear_field_idiom(self):
        ap = seeded(["111111", "101101"])
        ap.compare_write(KeyMask.empty(6), km(6, "xx000x"))
        assert ap.bits[:, 1:4].sum() == 0
        assert ap.bits[:, 0].tolist() == [True, True]
        assert ap.cycles == 1

    def test_overlap_rejected(self):
        ap = seeded(["0000"])
        with pytest.raises(ApContractError):
            ap.compare_write(km(4, "x1xx"), km(4, "x0x1"))

    def test_overlap_allowed_in_place(self):
        ap = seeded(["0100", "0000"])
        ap.compare_write(km(4, "x1xx"), km(4, "x0x1"), in_place=True)
        assert ap.bits[0].tolist() == [True, False, False, False]


class TestMove:
    def test_up_short(self):
        ap = create_ap(4, 1)
        ap.tag[:] = [0, 0, 1, 1]
        ap.move_tag(UP, SHORT)
        assert tags(ap) == "0110"

    def test_down_short(self):
        ap = create_ap(4, 1)
        ap.tag[:] = [0, 0, 1, 1]
        ap.move_tag(DOWN, SHORT)
        assert tags(ap) == "0001"

    def test_shift_out(self):
        ap = create_ap(4, 1)
        ap.tag[:] = [1, 0, 0, 0]
        ap.move_tag(UP, SHORT)
        assert tags(ap) == "0000"

    def test_long_beyond_depth(self):
        ap = create_ap(8, 1, long_step=16)
        ap.tag[:] = True
        ap.move_tag(DOWN, LONG)
        assert not ap.tag.any() and ap.cycles == 1

    def test_bad_direction(self):
        with pytest.raises(ApContractError):
            create_ap(4, 1).move_tag("left", SHORT)


class TestIfMatchRead:
    def test_if_match(self):
        ap = create_ap(4, 2)
        ap.tag[:] = [0, 0, 1, 0]
        assert ap.if_match() is True
        ap.tag[:] = False
        assert ap.if_match() is False
        ap.compare(KeyMask.empty(2))
        assert ap.if_match() is True
        assert ap.cycles == 4

    def test_read_round_trip(self):
        ap = create_ap(4, 4)
        ap.tag[:] = [0, 0, 1, 0]
        ap.write(km(4, "0101"))
        assert ap.read_row(2).tolist() == [1, 0, 1, 0]  # LSB first
        assert ap.read_row(0).tolist() == [0, 0, 0, 0]
        assert ap.cycles == 3

    def test_read_out_of_range(self):
        with pytest.raises(ApContractError):
            create_ap(4, 4).read_row(4)


# --- properties -------------------------------------------------------------

grids = st.integers(1, 12).flatmap(
    lambda d: st.integers(1, 8).flatmap(
        lambda w: st.tuples(
            st.lists(st.lists(st.booleans(), min_size=w, max_size=w), min_size=d, max_size=d),
            st.lists(st.booleans(), min_size=w, max_size=w),
            st.lists(st.booleans(), min_size=w, max_size=w),
            st.lists(st.booleans(), min_size=w, max_size=w),
            st.lists(st.booleans(), min_size=w, max_size=w),
        )
    )
)


def from_grid(bits):
    ap = ApState(len(bits), len(bits[0]))
    ap._cols[:] = np.array(bits, dtype=bool).T
    return ap


@given(grids)
def test_compare_then_write_equals_fused(data):
    bits, ck, cm, wk, wm = data
    cm, wm = np.array(cm), np.array(wm)
    wm = wm & ~cm  # fused form needs disjoint columns
    cmp, wr = KeyMask(ck, cm), KeyMask(wk, wm)
    a, b = from_grid(bits), from_grid(bits)
    a.compare(cmp)
    a.write(wr)
    b.compare_write(cmp, wr)
    assert np.array_equal(a.bits, b.bits) and np.array_equal(a.tag, b.tag)
    assert a.cycles == b.cycles + 1


@given(grids)
def test_compare_semantics(data):
    bits, ck, cm, _, _ = data
    ap = from_grid(bits)
    ap.compare(KeyMask(ck, cm))
    expect = [all(row[j] == ck[j] for j in range(len(ck)) if cm[j]) for row in bits]
    assert ap.tag.tolist() == expect


@given(grids)
def test_write_idempotent(data):
    bits, ck, cm, wk, wm = data
    ap = from_grid(bits)
    ap.compare(KeyMask(ck, cm))
    ap.write(KeyMask(wk, wm))
    once = ap.bits.copy()
    ap.write(KeyMask(wk, wm))
    assert np.array_equal(ap.bits, once)


@given(st.lists(st.booleans(), min_size=1, max_size=70), st.integers(0, 40))
def test_move_algebra(tag, s):
    ap = ApState(len(tag), 1, long_step=4)
    ap.tag[:] = tag
    for _ in range(s):
        ap.move_tag(UP, SHORT)
    expect = [tag[i + s] if i + s < len(tag) else False for i in range(len(tag))]
    assert ap.tag.tolist() == expect
    assert ap.cycles == s

    long_ap = ApState(len(tag), 1, long_step=4)
    long_ap.tag[:] = tag
    long_ap.move_tag(UP, LONG)
    short_ap = ApState(len(tag), 1, long_step=4)
    short_ap.tag[:] = tag
    for _ in range(4):
        short_ap.move_tag(UP, SHORT)
    assert np.array_equal(long_ap.tag, short_ap.tag)
    assert long_ap.cycles == 1 and short_ap.cycles == 4


@given(st.integers(1, 200))
def test_tag_all_then_if_match(depth):
    ap = ApState(depth, 3)
    ap.compare(KeyMask.empty(3))
    assert ap.if_match()


def test_trace_replay_matches_counters():
    ap = ApState(6, 5, trace=True)
    ap.compare(km(5, "xxx1x"))
    ap.write(km(5, "1xxxx"))
    ap.compare_write(KeyMask.empty(5), km(5, "x0xxx"))
    ap.move_tag(UP, SHORT)
    ap.move_tag(DOWN, LONG)
    ap.if_match()
    ap.read_row(3)
    assert len(ap.counters.log) == ap.cycles == 7
    replay = CycleCounters.from_log(ap.counters.log)
    assert replay.as_dict() == ap.counters.as_dict()


def test_trace_jsonl():
    ap = ApState(3, 2, trace=True)
    ap.compare(KeyMask.empty(2))
    ap.write(km(2, "1x"))
    buf = io.StringIO()
    assert ap.write_trace(buf, limit=1) == 1
    rec = json.loads(buf.getvalue())
    assert rec == {"seq": 0, "kind": "compare", "cmp_cols": 0, "wr_cols": 0, "tagged": 3}


def test_activity_accounting():
    ap = ApState(10, 4)
    ap.compare(km(4, "xx00"))  # all rows match
    ap.write(km(4, "1x1x"))
    c = ap.counters
    assert c.cmp_cell_events == 2 * 10
    assert c.wr_cell_events == 2 * 10
    assert c.tag_events == 20
    assert c.by_kind == {"compare": 1, "write": 1}


def test_counter_arithmetic():
    a = ApState(5, 2)
    a.compare(KeyMask.empty(2))
    snap = a.counters.snapshot()
    a.write(km(2, "11"))
    diff = a.counters.snapshot() - snap
    assert diff.cycles == 1 and diff.by_kind["write"] == 1 and diff.by_kind["compare"] == 0
    assert (snap + diff).as_dict() == a.counters.as_dict()


def test_load_rows():
    ap = ApState(4, 3)
    ap.load_rows(1, [0, 2], [[1, 1], [0, 1]])
    assert ap.bits.astype(int).tolist() == [[0, 0, 0], [1, 0, 1], [0, 0, 1], [0, 0, 0]]
    assert ap.cycles == 2
    with pytest.raises(ApContractError):
        ap.load_rows(3, [0], [[1], [1]])
