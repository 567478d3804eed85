from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import mannwhitneyu

from cider.dataset import (
    DatasetManifest,
    RecordingEntry,
    SynthSpec,
    convert_compare,
    format_manifest,
    generate_synthetic_corpus,
    group_instances,
    load_manifest,
    parse_manifest,
    synth_waveform,
    validate_manifest,
)
from cider.dsp import write_wav
from cider.errors import ConfigError, ConsistencyError, ManifestParseError, ManifestValidationError

from conftest import tone

HEAD = "recording_id,participant_id,modality,audio_path,label,split\n"


def make(entries, mods=None):
    entries = tuple(RecordingEntry(*e) for e in entries)
    mods = mods or tuple(sorted({e.modality for e in entries}))
    return DatasetManifest("m", entries, mods)


def test_ccs_train_counts():
    rows = [(f"r{i}", f"p{i}", "cough", f"a/{i}.wav", "positive" if i < 71 else "negative", "train")
            for i in range(286)]
    m = parse_manifest(HEAD + "".join(",".join(r) + "\n" for r in rows))
    assert m.counts()["train"] == {"positive": 71, "negative": 215, "blind": 0}


def test_roundtrip(tiny_corpus):
    text = format_manifest(tiny_corpus)
    again = parse_manifest(text, root=tiny_corpus.root)
    assert again.entries == tiny_corpus.entries
    assert format_manifest(again) == text


entry_st = st.tuples(
    st.text("abcxyz0123", min_size=1, max_size=6),
    st.text("pq123", min_size=1, max_size=4),
    st.sampled_from(["cough", "breath", "vowel"]),
    st.text("abc/._", min_size=1, max_size=8),
    st.sampled_from(["positive", "negative", "blind"]),
    st.sampled_from(["train", "val", "test"]),
)


@given(st.lists(entry_st, max_size=15))
def test_roundtrip_property(rows):
    m = make(rows, ("cough", "breath", "vowel"))
    back = parse_manifest(format_manifest(m), modality_set=m.modality_set)
    assert back.entries == m.entries


def test_parse_errors_carry_line():
    with pytest.raises(ManifestParseError, match="line 3"):
        parse_manifest(HEAD + "a,p,cough,x.wav,positive,train\nb,q,cough,y.wav,maybe,train\n")
    with pytest.raises(ManifestParseError, match="line 1"):
        parse_manifest("id,who\n")
    with pytest.raises(ManifestParseError, match="line 2"):
        parse_manifest(HEAD + "a,p,cough\n")


def test_validation_errors(tmp_path):
    with pytest.raises(ManifestValidationError, match="duplicate"):
        validate_manifest(make([("a", "p", "cough", "x", "positive", "train")] * 2), check_audio=False)
    with pytest.raises(ManifestValidationError, match="blind"):
        validate_manifest(make([("a", "p", "cough", "x", "blind", "train")]), check_audio=False)
    with pytest.raises(ManifestValidationError, match="several splits"):
        validate_manifest(make([("a", "p", "cough", "x", "positive", "train"),
                                ("b", "p", "cough", "y", "positive", "test")]), check_audio=False)
    (tmp_path / "m.csv").write_text(HEAD + "a,p,cough,gone1.wav,positive,train\nb,q,cough,gone2.wav,negative,train\n")
    with pytest.raises(ManifestValidationError) as info:
        load_manifest(tmp_path / "m.csv")
    assert "gone1.wav" in str(info.value) and "gone2.wav" in str(info.value)


def test_grouping_multimodal():
    rows = [(f"{p}-{m}", p, m, "x", "positive", "train") for p in ("p1", "p2") for m in ("breath", "vowel")]
    rows.append(("p3-breath", "p3", "breath", "x", "negative", "train"))
    m = make(rows, ("breath", "vowel"))
    c = Counter()
    groups = group_instances(m, "train", counter=c)
    assert [g.instance_id for g in groups] == ["p1", "p2"] and c["dropped_incomplete"] == 1
    zf = group_instances(m, "train", policy="zero-fill")
    assert [g.instance_id for g in zf] == ["p1", "p2", "p3"]
    assert zf[2].recording("vowel") is None


def test_grouping_consistency_errors():
    dup = make([("a", "p", "breath", "x", "positive", "train"), ("b", "p", "breath", "y", "positive", "train"),
                ("c", "p", "vowel", "z", "positive", "train")], ("breath", "vowel"))
    with pytest.raises(ConsistencyError):
        group_instances(dup, "train")
    mixed = make([("a", "p", "breath", "x", "positive", "train"),
                  ("c", "p", "vowel", "z", "negative", "train")], ("breath", "vowel"))
    with pytest.raises(ConsistencyError):
        group_instances(mixed, "train")


@given(st.lists(st.tuples(st.sampled_from("abcdefgh"), st.sampled_from(["breath", "vowel", "counting"])),
                unique=True, max_size=24),
       st.sampled_from(["drop-incomplete", "zero-fill"]))
def test_group_count_bounded_by_participants(pairs, policy):
    rows = [(f"{p}-{m}", p, m, "x", "negative", "train") for p, m in pairs]
    m = make(rows, ("breath", "vowel", "counting"))
    groups = group_instances(m, "train", policy)
    participants = {p for p, _ in pairs}
    complete = {p for p in participants if sum(q == p for q, _ in pairs) == 3}
    assert len(groups) <= len(participants)
    assert len(groups) == (len(participants) if policy == "zero-fill" else len(complete))


def test_single_modality_one_instance_per_recording():
    rows = [("r1", "p1", "cough", "x", "positive", "train"), ("r2", "p1", "cough", "y", "positive", "train")]
    assert [g.instance_id for g in group_instances(make(rows), "train")] == ["r1", "r2"]


def test_synth_is_pure_function(tmp_path):
    spec = SynthSpec(counts={"train": (1, 1)}, duration_range=(0.3, 0.5), modality_set=("vowel",))
    a = generate_synthetic_corpus(spec, 9, tmp_path / "a")
    b = generate_synthetic_corpus(spec, 9, tmp_path / "b")
    assert format_manifest(a) == format_manifest(b)
    for e in a.entries:
        assert (tmp_path / "a" / e.audio_path).read_bytes() == (tmp_path / "b" / e.audio_path).read_bytes()


def test_synth_rejects_empty_class():
    with pytest.raises(ConfigError):
        SynthSpec(counts={"train": (0, 5)})


def band_energy(w, band=(1500, 2500)):
    spec = np.abs(np.fft.rfft(w.samples)) ** 2
    f = np.fft.rfftfreq(len(w), 1 / w.sample_rate)
    sel = (f >= band[0]) & (f <= band[1])
    return spec[sel].sum() / spec.sum()


@pytest.mark.parametrize("separation,separable,negative_band", [
    (0.0, False, None), (1.0, True, None), (0.0, False, (5000.0, 6000.0)), (1.0, True, (5000.0, 6000.0)),
])
def test_synth_signature_band(separation, separable, negative_band):
    spec = SynthSpec(separation=separation, duration_range=(0.5, 0.5), negative_band=negative_band)
    energies = {}
    for positive in (True, False):
        energies[positive] = [
            band_energy(synth_waveform(spec, "vowel", positive, np.random.default_rng([i, positive]), 150.0))
            for i in range(60)
        ]
    p = mannwhitneyu(energies[True], energies[False]).pvalue
    assert (p < 1e-6) if separable else (p > 0.01)


def test_blind_corpus(tmp_path):
    spec = SynthSpec(counts={"train": (1, 1), "val": (1, 1), "test": (2, 1)}, duration_range=(0.3, 0.3),
                     modality_set=("cough",), blind_test=True)
    m = generate_synthetic_corpus(spec, 0, tmp_path)
    assert m.counts()["test"] == {"positive": 0, "negative": 0, "blind": 3}
    load_manifest(tmp_path / "manifest.csv")


def test_convert_compare(tmp_path):
    (tmp_path / "wav").mkdir()
    (tmp_path / "lab").mkdir()
    for name in ("t1", "t2", "d1", "e1"):
        write_wav(tmp_path / "wav" / f"{name}.wav", tone(300, 0.2))
    (tmp_path / "lab" / "train.csv").write_text("filename,label\nt1.wav,positive\nt2.wav,negative\n")
    (tmp_path / "lab" / "devel.csv").write_text("filename,label\nd1.wav,negative\n")
    (tmp_path / "lab" / "test.csv").write_text("filename,label\ne1.wav,?\n")
    m = convert_compare(tmp_path)
    validate_manifest(m)
    assert m.counts()["test"]["blind"] == 1 and m.counts()["train"]["positive"] == 1
