import pytest

from toydetr.plots import CsvParseError, parse_curves, plot_files

CDF = """layer,group,value,cdf
3,matched,0.2,0.5
3,matched,0.6,1.0
3,unmatched,0.1,1.0
"""


def test_empty_file_gives_empty_axes(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text("")
    svg = plot_files([src], tmp_path / "out.svg")
    assert svg.startswith("<svg") and "<path" not in svg and "<line" in svg


def test_two_curves_two_paths(tmp_path):
    src = tmp_path / "cdf.csv"
    src.write_text(CDF)
    svg = plot_files([src], tmp_path / "out.svg", title="scores")
    assert svg.count("<path") == 2 and "layer 3 unmatched" in svg


def test_byte_identical(tmp_path):
    src = tmp_path / "cdf.csv"
    src.write_text(CDF)
    a = plot_files([src], tmp_path / "a.svg")
    b = plot_files([src], tmp_path / "b.svg")
    assert a == b and (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_overlay_prefixes_file_stems(tmp_path):
    a, b = tmp_path / "with.csv", tmp_path / "without.csv"
    a.write_text(CDF)
    b.write_text(CDF)
    svg = plot_files([a, b], tmp_path / "o.svg")
    assert svg.count("<path") == 4 and "without: layer 3 matched" in svg


def test_pr_curves():
    curves = parse_curves("iou_threshold,recall,precision\n0.50,0.00,1.0\n0.50,1.00,0.5\n0.75,0.00,0.8\n")
    assert list(curves) == ["IoU=0.50", "IoU=0.75"]
    assert curves["IoU=0.50"] == ([0.0, 1.0], [1.0, 0.5])


@pytest.mark.parametrize("text, needle", [
    ("layer,group,value,cdf\n1,matched,abc,0.5\n", "bad.csv row 2, column 'value'"),
    ("layer,group,value,cdf\n1,matched,0.1\n", "bad.csv row 2: expected 4 columns"),
    ("a,b\n", "bad.csv row 1: unrecognised header"),
])
def test_parse_errors_name_row_and_column(text, needle):
    with pytest.raises(CsvParseError, match=needle):
        parse_curves(text, "bad.csv")
