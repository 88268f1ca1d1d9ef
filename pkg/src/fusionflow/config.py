"""Flat key-value run configuration.

Files hold one `section.key = value` pair per line; `#` starts a comment.
Values resolve as defaults, then the config file, then command-line flags.
The default file path can come from the FUSIONFLOW_CONFIG environment variable.
"""
import os

CONFIG_ENV = 'FUSIONFLOW_CONFIG'


class ConfigError(ValueError):
    pass


def parse_config_text(text, source='<config>'):
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError('{}:{}: expected key = value'.format(source, number))
        key, _, value = line.partition('=')
        values[key.strip()] = value.strip()
    return values


def read_config(path):
    if not os.path.isfile(path):
        raise ConfigError('config file not found: {}'.format(path))
    with open(path) as fh:
        return parse_config_text(fh.read(), path)


def default_config_path():
    return os.environ.get(CONFIG_ENV) or None


def format_config(values):
    return ''.join('{} = {}\n'.format(key, values[key]) for key in sorted(values))


def write_config(path, values):
    with open(path, 'w') as fh:
        fh.write(format_config(values))


def section(values, prefix):
    '''Keys under `prefix.` with the prefix stripped.'''
    start = prefix + '.'
    return {key[len(start):]: value for key, value in values.items() if key.startswith(start)}
