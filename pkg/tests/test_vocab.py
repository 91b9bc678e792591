import pytest

from streamlm import vocab as V
from streamlm import data as D


def test_special_ids_distinct_and_documented():
    ids = [V.PAD, V.EOS, V.STREAM_EOS, V.USER, V.ASSISTANT, V.FRAME]
    assert ids == sorted(set(ids))
    voc = V.build_vocab()
    assert voc.words[V.EOS] == "</s>"
    assert voc.eos_id == V.EOS
    assert voc.stream_eos_id == V.STREAM_EOS


def test_tie_stream_eos_flag():
    tied = V.build_vocab(tie_stream_eos=True)
    assert tied.stream_eos_id == tied.eos_id == V.EOS


def test_encode_decode_roundtrip():
    voc = V.build_vocab()
    text = "you pick the red cup on the red table"
    assert voc.decode(voc.encode(text)) == text


def test_unknown_word_rejected():
    voc = V.build_vocab()
    with pytest.raises(KeyError, match="zebra"):
        voc.encode("the zebra smiles")


def test_everything_generable_is_encodable():
    voc = V.build_vocab()
    for a in D.task_library():
        voc.encode(a.phrase)
    for tpl in D.TEMPLATES:
        voc.encode(tpl.query)
        voc.encode(tpl.none_text)
        voc.encode(f"{tpl.prefix} {D.task_library()[0].phrase}")
    for t in range(D.N_TASKS):
        voc.encode(D.task_name(t))
    voc.encode(V.SYSTEM_PROMPT)
    voc.encode(V.NARRATION_QUERY)
    voc.encode(V.PER_FRAME_QUERY)
