"""Run configuration: environment defaults, INI files and per-command option models.

Precedence, lowest first: model defaults, the ``[common]`` section, the
command's own section, ``MDLM_LAB_*`` environment variables, command-line flags.
"""

import configparser
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Type

from environs import Env
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ._utils.errors import intercept_errors
from .common.errors import ConfigError
from .decoding import (
    BaseSampler,
    ConvSettings,
    DecodePolicy,
    Direction,
    RepPenaltySettings,
    SemiARSettings,
)
from .denoiser import EosMode, PosteriorMethod
from .hazard import ConvMode, HazardFamily, HazardKind

ENV_PREFIX = "MDLM_LAB_"
COMMON_SECTION = "common"


class LabSettings(BaseModel):
    """Environment-provided defaults. ``None`` means the variable is unset.

    Attributes:
        output_root (Optional[str]): ``MDLM_LAB_OUTPUT_ROOT``; parent of default output directories.
        log_level (Optional[str]): ``MDLM_LAB_LOG_LEVEL``.
        jobs (Optional[int]): ``MDLM_LAB_JOBS``.

    Example:
        ```python
        settings = LabSettings.from_env()  # reads .env, then .env.local
        ```
    """

    output_root: Optional[str] = None
    log_level: Optional[str] = None
    jobs: Optional[int] = Field(default=None, ge=1)

    @classmethod
    def from_env(cls) -> "LabSettings":
        # Initialize env - it automatically reads from .env and .env.local
        env = Env()
        env.read_env()
        env.read_env(".env.local", override=True)
        with env.prefixed(ENV_PREFIX):
            return cls(
                output_root=env.str("OUTPUT_ROOT", None),
                log_level=env.str("LOG_LEVEL", None),
                jobs=env.int("JOBS", None),
            )

    def overrides(self) -> Dict[str, Any]:
        return {key: value for key, value in self.model_dump().items() if value is not None}


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        return [int(part) for part in value.replace(";", ",").split(",") if part.strip()]
    return value


def _existing(value: Optional[str]) -> Optional[str]:
    if value is not None and not Path(value).is_file():
        raise ValueError(f"file not found: {value}")
    return value


class CommandOptions(BaseModel):
    """Options every command accepts.

    Attributes:
        seed (int): Base seed.
        out (Optional[str]): Output directory; defaults to ``<output_root>/<command>``.
        output_root (str): Parent of default output directories.
        jobs (int): Worker bound for parallel runs.
        log_level (str): Logging level name.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    out: Optional[str] = None
    output_root: str = "runs"
    jobs: int = Field(default=1, ge=1)
    log_level: str = "INFO"

    def output_dir(self, command: str) -> Path:
        return Path(self.out) if self.out else Path(self.output_root) / command


class GenCorpusOptions(CommandOptions):
    content_size: int = Field(default=64, ge=2)
    n: int = Field(default=2000, ge=1)
    templates: int = Field(default=16, ge=1)
    prompt_min: int = Field(default=4, ge=1)
    prompt_max: int = Field(default=8, ge=1)
    branching: int = Field(default=3, ge=1)
    function_words: int = Field(default=8, ge=0)
    function_mass: float = Field(default=0.3, ge=0.0, lt=1.0)
    copy_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    eos_rate: float = Field(default=1.0 / 30.0, gt=0.0, lt=1.0)
    max_response_len: int = Field(default=40, ge=1)
    shards: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_prompt_range(self) -> "GenCorpusOptions":
        if self.prompt_min > self.prompt_max:
            raise ValueError("prompt_min must not exceed prompt_max")
        return self


class TrainOptions(CommandOptions):
    corpus: str
    params: Optional[str] = None
    window: int = Field(default=64, ge=2)
    steps: int = Field(default=500, ge=0)
    learning_rate: float = Field(default=0.5, ge=0.0)
    batch_size: int = Field(default=8, ge=1)
    schedule_steps: int = Field(default=16, ge=1)
    eval_every: int = Field(default=50, ge=1)
    held_out_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    eos_mode: EosMode = EosMode.FULL_FILL
    radius: int = Field(default=8, ge=1)
    init_scale: float = Field(default=0.0, ge=0.0)

    _check_files = field_validator("corpus", "params")(_existing)


class R2FTOptions(CommandOptions):
    corpus: str
    params: str
    prior: Optional[str] = None
    window: int = Field(default=64, ge=2)
    steps: int = Field(default=300, ge=0)
    learning_rate: float = Field(default=0.5, ge=0.0)
    batch_size: int = Field(default=8, ge=1)
    gamma: float = Field(default=0.1, ge=0.0)
    beta: float = Field(default=1.0, gt=0.0)
    g_max: int = Field(default=8, ge=1)
    z_min: int = Field(default=4, ge=1)
    z_max: int = Field(default=16, ge=1)
    eos_insert: bool = True
    eval_every: int = Field(default=50, ge=1)
    eval_size: int = Field(default=64, ge=1)
    sample_prompts: int = Field(default=8, ge=0)
    sample_steps: int = Field(default=16, ge=1)
    top_k: int = Field(default=5, ge=1)

    _check_files = field_validator("corpus", "params", "prior")(_existing)


class DenoiserKind(str, Enum):
    """**Enum Members**:
    - `LINEAR` ("linear"): trained parameters from ``params``.
    - `ORACLE` ("oracle"): exact posterior from ``corpus_model``.
    """

    LINEAR = "linear"
    ORACLE = "oracle"

    def __str__(self):
        return self.value


class DecodeOptions(CommandOptions):
    """Decoding run settings; the policy fields are flattened for flat config files.

    ``conv_kernel``, ``blocks`` and ``rep_penalty`` of 0 disable the modifier.
    """

    corpus: str
    denoiser: DenoiserKind = DenoiserKind.LINEAR
    params: Optional[str] = None
    corpus_model: Optional[str] = None
    posterior: PosteriorMethod = PosteriorMethod.FORWARD_BACKWARD
    window: int = Field(default=1024, ge=2)
    steps: int = Field(default=128, ge=1)
    runs: int = Field(default=8, ge=1)
    base: BaseSampler = BaseSampler.CATEGORICAL
    top_k: Optional[int] = Field(default=None, ge=1)
    conv_kernel: int = Field(default=0, ge=0)
    conv_scale: float = Field(default=1.0, gt=0.0)
    blocks: int = Field(default=0, ge=0)
    eos_fill: bool = False
    cache: bool = False
    rep_penalty: float = Field(default=0.0, ge=0.0, le=1.0)
    direction: Direction = Direction.LEFT_CONTEXT

    _check_files = field_validator("corpus", "params", "corpus_model")(_existing)

    @model_validator(mode="after")
    def _check_denoiser(self) -> "DecodeOptions":
        if self.denoiser is DenoiserKind.LINEAR and not self.params:
            raise ValueError("the linear denoiser needs params")
        if self.denoiser is DenoiserKind.ORACLE and not self.corpus_model:
            raise ValueError("the oracle denoiser needs corpus_model")
        return self

    def policy(self, **changes: Any) -> DecodePolicy:
        """Builds the decoding policy, optionally with some flattened fields replaced."""
        fields = self.model_dump()
        fields.update(changes)
        return DecodePolicy(
            base=fields["base"],
            top_k=fields["top_k"],
            conv=ConvSettings(kernel=fields["conv_kernel"], scale=fields["conv_scale"]) if fields["conv_kernel"] else None,
            semi_ar=SemiARSettings(blocks=fields["blocks"]) if fields["blocks"] else None,
            eos_fill=fields["eos_fill"],
            cache=fields["cache"],
            rep_penalty=RepPenaltySettings(factor=fields["rep_penalty"]) if fields["rep_penalty"] else None,
            direction=fields["direction"],
        )


class SweepAxis(str, Enum):
    """**Enum Members**:
    - `BLOCK_SIZE` ("block_size"): semi-AR block length ``L_b``.
    - `KERNEL_SIZE` ("kernel_size"): convolution kernel ``K``.
    - `STEPS` ("steps"): step budget ``S``.
    """

    BLOCK_SIZE = "block_size"
    KERNEL_SIZE = "kernel_size"
    STEPS = "steps"

    def __str__(self):
        return self.value


class SweepOptions(DecodeOptions):
    axis: SweepAxis
    values: List[int] = Field(min_length=1)
    seeds: int = Field(default=1, ge=1)
    prior: str
    corpus_model: str

    _split_values = field_validator("values", mode="before")(_split_ints)
    _check_more = field_validator("prior")(_existing)

    @model_validator(mode="after")
    def _check_axis(self) -> "SweepOptions":
        if self.axis is SweepAxis.BLOCK_SIZE and self.conv_kernel:
            raise ValueError("a block_size sweep cannot run with conv")
        if self.axis is SweepAxis.KERNEL_SIZE and self.blocks:
            raise ValueError("a kernel_size sweep cannot run with semi_ar blocks")
        if any(value < 1 for value in self.values):
            raise ValueError("sweep values must be positive")
        return self


class MetricsOptions(CommandOptions):
    runs_dir: str
    corpus: str
    corpus_model: str
    prior: str
    L_star_norm: Optional[float] = Field(default=None, gt=0.0)  # pylint: disable=invalid-name
    params: Optional[str] = None
    zone_prompt: int = Field(default=0, ge=0)
    zone_top_k: int = Field(default=5, ge=1)

    _check_files = field_validator("corpus", "corpus_model", "prior", "params")(_existing)

    @field_validator("runs_dir")
    @classmethod
    def _check_dir(cls, value: str) -> str:
        if not Path(value).is_dir():
            raise ValueError(f"directory not found: {value}")
        return value


class HazardOptions(CommandOptions):
    Ls: List[int] = Field(default=[64, 128], min_length=1)  # pylint: disable=invalid-name
    Ss: List[int] = Field(default=[8, 16, 32], min_length=1)  # pylint: disable=invalid-name
    bs: List[int] = Field(default=[1, 2, 4, 8], min_length=1)
    family: HazardKind = HazardKind.RATIO
    c: float = Field(default=0.1, gt=0.0)
    p_cap: float = Field(default=0.5, gt=0.0, lt=1.0)
    w0: Optional[float] = Field(default=None, gt=0.0)
    mode: ConvMode = ConvMode.PER_STEP

    _split_lists = field_validator("Ls", "Ss", "bs", mode="before")(_split_ints)

    def hazard_family(self) -> HazardFamily:
        return HazardFamily(kind=self.family, c=self.c, p_cap=self.p_cap, w0=self.w0)


COMMAND_OPTIONS: Dict[str, Type[CommandOptions]] = {
    "gen-corpus": GenCorpusOptions,
    "train": TrainOptions,
    "r2ft": R2FTOptions,
    "decode": DecodeOptions,
    "sweep": SweepOptions,
    "metrics": MetricsOptions,
    "hazard": HazardOptions,
}


@intercept_errors(message_prefix="Invalid config file: ")
def read_config_file(path: str, command: str) -> Dict[str, Any]:
    """Flat values of ``[common]`` overlaid with ``[<command>]``.

    A ``.json`` path is read as a run manifest and its recorded config is used.
    """
    if Path(path).suffix == ".json":
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
        if manifest.get("command") != command:
            raise ConfigError(f"manifest was written by {manifest.get('command')!r}, not {command!r}")
        return {key: value for key, value in manifest["config"].items() if value is not None}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as handle:
        parser.read_file(handle)
    values: Dict[str, Any] = {}
    for section in (COMMON_SECTION, command):
        if parser.has_section(section):
            values.update(parser.items(section))
    return values


@intercept_errors(message_prefix="Invalid options: ")
def resolve_options(
    command: str,
    config_path: Optional[str] = None,
    flags: Optional[Dict[str, Any]] = None,
    settings: Optional[LabSettings] = None,
) -> CommandOptions:
    """Merges every configuration layer and validates the result.

    Args:
        command (str): Subcommand name.
        config_path (Optional[str]): INI file or run manifest.
        flags (Optional[Dict[str, Any]]): Command-line values; ``None`` entries are ignored.
        settings (Optional[LabSettings]): Environment layer; read from the environment if omitted.

    Returns:
        CommandOptions: The command's validated option model.

    Raises:
        ConfigError: On unknown keys or invalid values.
    """
    if command not in COMMAND_OPTIONS:
        raise ConfigError(f"Unknown command: {command}")
    values: Dict[str, Any] = {}
    if config_path:
        values.update(read_config_file(config_path, command))
    values.update((settings or LabSettings.from_env()).overrides())
    values.update({key: value for key, value in (flags or {}).items() if value is not None})
    return COMMAND_OPTIONS[command](**values)


def parse_assignments(items: Optional[List[str]]) -> Dict[str, str]:
    """``["key=value", ...]`` from repeated ``--set`` flags."""
    assignments = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Expected key=value, got {item!r}")
        assignments[key.strip()] = value.strip()
    return assignments
