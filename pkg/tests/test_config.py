import pytest

from fusionflow import config


def test_parse_and_format_round_trip(tmp_path):
    values = {'run.seed': '3', 'model.channels': '1,2,3,4,5,6'}
    path = tmp_path / 'c.txt'
    config.write_config(str(path), values)
    assert config.read_config(str(path)) == values


def test_comments_and_blank_lines():
    text = '# header\n\nrun.seed = 4  # trailing\n'
    assert config.parse_config_text(text) == {'run.seed': '4'}


def test_errors(tmp_path):
    with pytest.raises(config.ConfigError, match='line'):
        config.parse_config_text('just words', 'line')
    with pytest.raises(config.ConfigError, match='missing.txt'):
        config.read_config(str(tmp_path / 'missing.txt'))


def test_section_and_env(monkeypatch):
    assert config.section({'a.x': '1', 'b.y': '2'}, 'a') == {'x': '1'}
    monkeypatch.setenv(config.CONFIG_ENV, '/some/file')
    assert config.default_config_path() == '/some/file'
    monkeypatch.delenv(config.CONFIG_ENV)
    assert config.default_config_path() is None
