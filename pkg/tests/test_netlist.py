import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesim.decks import deck_names, load_deck
from wavesim.netlist import (
    Circuit,
    ParseError,
    SourceSpec,
    parse,
    parse_value,
    serialize,
    validate,
)


class TestValues:
    @pytest.mark.parametrize("tok,val", [
        ("1k", 1000.0), ("10n", 1e-8), ("2.5u", 2.5e-6), ("3meg", 3e6),
        ("1e-3", 1e-3), ("-5", -5.0), ("4.7m", 4.7e-3), ("100p", 1e-10),
        ("1f", 1e-15), ("2g", 2e9), ("5V", 5.0),
    ])
    def test_suffixes(self, tok, val):
        assert parse_value(tok) == pytest.approx(val)

    def test_garbage(self):
        with pytest.raises(ParseError):
            parse_value("abc")


class TestParse:
    def test_divider(self):
        c = parse("V1 1 0 DC 5\nR1 1 0 1k\n.tran 1m\n")
        assert len(c.devices) == 2
        r = c.devices[1]
        assert r.kind == "R" and r.params["value"] == 1000.0
        assert c.analyses[0].params[0] == pytest.approx(1e-3)

    def test_cap_suffix(self):
        c = parse("V1 2 0 DC 1\nC1 2 0 10n\nR1 2 0 1\n.tran 1u\n")
        assert c.devices[1].params["value"] == pytest.approx(1e-8)

    def test_comments_and_continuation(self):
        c = parse("* a comment\nV1 in 0 PWL(0 0\n+ 1m 5) ; trailing\nR1 in 0 1k\n.tran 1m\n")
        assert c.devices[0].source_spec.kind == "PWL"
        assert c.devices[0].source_spec.params == (0, 0, 1e-3, 5)

    def test_case_insensitive(self):
        c = parse("v1 a 0 dc 3\nr1 a 0 2K\n.tran 1m\n")
        assert c.devices[0].kind == "V"
        assert c.devices[1].params["value"] == 2000.0

    def test_mos_line(self):
        c = parse("VDD d 0 DC 5\nM1 d g 0 TYPE=NMOS KP=2e-5 VT0=0.7 W=1e-4 L=1e-5\nR1 g 0 1k\n.tran 1m\n")
        m = c.devices[1]
        assert m.kind == "MOS" and m.params["TYPE"] == "NMOS"
        assert m.params["W"] == pytest.approx(1e-4)

    def test_errors(self):
        with pytest.raises(ParseError):
            parse("Q1 1 0 2 foo\n")
        with pytest.raises(ParseError):
            parse("R1 1 0 0\n")  # zero resistance
        with pytest.raises(ParseError):
            parse("M1 1 2 0 TYPE=BJT\nR1 1 0 1\n")
        with pytest.raises(ParseError):
            parse(".nodeset v(1)=0\n")

    def test_all_bundled_decks_round_trip(self):
        for name in deck_names():
            c = parse(load_deck(name))
            c2 = parse(serialize(c))
            assert c2.devices == c.devices
            assert c2.analyses == c.analyses

    @given(st.binary(max_size=200))
    @settings(max_examples=200, deadline=None)
    def test_never_panics(self, data):
        text = data.decode("utf-8", errors="replace")
        try:
            c = parse(text)
            assert isinstance(c, Circuit)
        except ParseError:
            pass


class TestSources:
    def test_sin(self):
        s = SourceSpec("SIN", (1.0, 2.0, 50.0))
        assert s(0.0) == pytest.approx(1.0)
        assert s(0.005) == pytest.approx(3.0)

    def test_pulse(self):
        s = SourceSpec("PULSE", (0, 5, 1e-6, 1e-7, 1e-7, 1e-6, 4e-6))
        assert s(0.0) == 0.0
        assert s(1.15e-6) == pytest.approx(5.0)
        assert s(1.05e-6) == pytest.approx(2.5)
        assert s(5.15e-6) == pytest.approx(5.0)  # second period

    def test_pwl(self):
        s = SourceSpec("PWL", (0, 0, 1, 10))
        assert s(0.25) == pytest.approx(2.5)
        np.testing.assert_allclose(s(np.array([0, 0.5, 1.0])), [0, 5, 10])

    def test_pulse_corners(self):
        s = SourceSpec("PULSE", (0, 5, 1e-6, 1e-7, 1e-7, 1e-6, 4e-6))
        corners = np.array(s.corner_times(5e-6))
        for expect in (1e-6, 1.1e-6, 5e-6):
            assert np.min(np.abs(corners - expect)) < 1e-12


class TestValidate:
    def test_divider_clean(self):
        c = parse("V1 1 0 DC 5\nR1 1 0 1k\n.tran 1m\n")
        assert validate(c) == []

    def test_floating_cap_node(self):
        c = parse("V1 1 0 DC 5\nR1 1 0 1k\nC1 1 2 1n\n.tran 1m\n")
        kinds = [d.kind for d in validate(c)]
        assert "FloatingNode" in kinds

    def test_parallel_v_sources(self):
        c = parse("V1 1 0 DC 5\nV2 1 0 DC 3\nR1 1 0 1k\n.tran 1m\n")
        kinds = [d.kind for d in validate(c)]
        assert "VoltageLoop" in kinds

    def test_missing_analysis(self):
        c = parse("V1 1 0 DC 5\nR1 1 0 1k\n")
        kinds = [d.kind for d in validate(c)]
        assert "MissingAnalysis" in kinds

    def test_bundled_decks_clean(self):
        for name in deck_names():
            c = parse(load_deck(name))
            assert validate(c) == [], name
