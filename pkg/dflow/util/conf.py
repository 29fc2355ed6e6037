import json
import os
from typing import Dict, Iterable, List, Optional, Tuple, Type

import yaml
from attrdict import AttrDict
from pydantic import BaseModel, ValidationError

from hydra import log

from .io import write_yaml


class Config:
    """Experiment configuration: one YAML file of named sections.

    Sections are pydantic models registered with @Config.defaults; every field
    has a default and unknown keys are rejected with the offending file line.
    """
    DEFAULT: Dict[str, Type[BaseModel]] = {}

    class Error(ValueError):
        pass

    @staticmethod
    def defaults(cls):
        """Decorator to register cls as the model for section cls.SECTION.
        """
        Config.DEFAULT[cls.SECTION] = cls
        return cls

    @staticmethod
    def exists(path: str) -> bool:
        return os.path.isfile(path)

    @staticmethod
    def parse_override(item: str) -> Tuple[List[str], object]:
        key, sep, value = item.partition("=")

        if not sep or not key.strip():
            raise Config.Error(f"--override {item!r}: expected dotted.key=value")

        try:
            parsed = yaml.safe_load(value) if value.strip() else None
        except yaml.YAMLError as exc:
            raise Config.Error(f"--override {item!r}: {exc}") from exc

        return key.strip().split("."), parsed

    @staticmethod
    def set(data: dict, keys: List[str], value) -> None:
        node = data

        for key in keys[:-1]:
            child = node.get(key)

            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise Config.Error(f"--override {'.'.join(keys)}: {key} is not a section")

            node = child

        node[keys[-1]] = value

    @staticmethod
    def read(path: str, overrides: Iterable[str] = ()) -> AttrDict:
        if not Config.exists(path):
            raise FileNotFoundError(path)

        with open(path, "r") as conf:
            text = conf.read()

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else 0
            raise Config.Error(f"{path}:{line}: {getattr(exc, 'problem', exc)}") from exc

        if data is None:
            data = {}

        if not isinstance(data, dict):
            raise Config.Error(f"{path}:1: top level must be a mapping of sections")

        overridden = []

        for item in overrides:
            keys, value = Config.parse_override(item)
            Config.set(data, keys, value)
            overridden.append(keys)

        log.debug(f"config: {path} overrides={len(overridden)}")
        return Config.load(data, source=path, text=text, overridden=overridden)

    @staticmethod
    def load(data: dict, source: str = "<config>", text: Optional[str] = None,
             overridden: Iterable[List[str]] = ()) -> AttrDict:
        root = yaml.compose(text) if text else None
        overridden = [tuple(keys) for keys in overridden]
        conf = AttrDict()

        def where(loc: Tuple) -> str:
            for keys in overridden:
                if tuple(str(k) for k in loc[:len(keys)]) == keys:
                    return f"{source}:--override"

            return f"{source}:{Config._line(root, loc)}"

        for name in data:
            if name not in Config.DEFAULT:
                raise Config.Error(f"{where((name,))}: {name}: unknown section (expected one of {', '.join(sorted(Config.DEFAULT))})")

        for name, model in Config.DEFAULT.items():
            section = data.get(name) or {}

            if not isinstance(section, dict):
                raise Config.Error(f"{where((name,))}: {name}: section must be a mapping")

            try:
                conf[name] = model.parse_obj(section)
            except ValidationError as exc:
                err = exc.errors()[0]
                loc = (name,) + tuple(err["loc"])
                dotted = ".".join(str(part) for part in loc if part != "__root__")
                raise Config.Error(f"{where(loc)}: {dotted}: {err['msg']}") from exc

        return conf

    @staticmethod
    def _line(root, loc: Tuple) -> int:
        """1-based line of the deepest YAML node on the error path, 0 if unknown.
        """
        line, node = 0, root

        for part in loc:
            if isinstance(node, yaml.MappingNode):
                for key, value in node.value:
                    if key.value == str(part):
                        line, node = key.start_mark.line + 1, value
                        break
                else:
                    break
            elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
                node = node.value[part]
                line = node.start_mark.line + 1
            else:
                break

        return line

    @staticmethod
    def dump(conf: AttrDict) -> dict:
        return {name: json.loads(section.json()) for name, section in conf.items()}

    @staticmethod
    def write(conf: AttrDict, path: str) -> None:
        log.debug(f"config: write {path}")
        write_yaml(path, Config.dump(conf))
