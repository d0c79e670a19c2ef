"""Run configuration: one human-editable TOML file describing a whole run.

``${ENV_VAR}`` references inside string values are interpolated at load time
so secrets stay in the environment and never reach run-state files. Unknown
keys are rejected outright: a typo in a threshold name must not silently
change gating behavior.
"""

from __future__ import annotations

import os
import re
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controller import DEFAULT_VOLUME_SCHEDULE, LoopConfig, RunStack
from .curation import CurationConfig, MinHashParams, QualityRules
from .errors import ConfigError
from .gateway import Gateway, HttpProvider, MockProvider, RetryPolicy, UsageLedger
from .judging import builtin_judge_template, load_judge_template
from .mocks import capability_judge_responder, constant_judge_responder, synthesizer_responder
from .rollout import (
    CommandInferenceBackend,
    DecodingParams,
    GatewayInferenceBackend,
    MockInferenceBackend,
)
from .synthesis import builtin_template, load_template
from .tuning import CapabilityProfile, CommandExecutor, ExecutorSpec, MockTrainer

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

_SCHEMA: dict[str, set[str]] = {
    "": {"schema"},
    "run": {"seed", "run_id", "max_in_flight"},
    "dataset": {"path", "task", "train_count", "split_seed"},
    "loop": {"epsilon_mean", "epsilon_coverage", "zeta", "zeta_list", "gate_metric",
             "max_cycles", "volume_schedule", "k", "m_repeats", "samples_per_call",
             "over_request_factor"},
    "decoding": {"temperature", "top_p", "max_new_tokens"},
    "synthesis": {"template", "generator_model"},
    "judging": {"template", "judge_model"},
    "curation": {"num_hashes", "shingle_size", "lsh_bands", "lsh_rows",
                 "jaccard_threshold", "hash_seed", "min_response_tokens",
                 "max_repeated_fourgram_ratio", "decontam_threshold"},
    "executor": {"kind", "command", "timeout_s", "capability_max",
                 "capability_half_life", "spec"},
    "executor.spec": {"base_model", "precision", "scheduler", "max_tokens",
                      "adapter_method", "lora_rank", "lora_alpha", "lora_dropout",
                      "epochs", "learning_rate", "batch_size"},
    "inference": {"kind", "model_id", "command", "timeout_s", "seed"},
    "provider": {"kind", "seed", "behavior", "samples_per_call", "precision",
                 "similarity", "base_url", "api_key_env", "model", "timeout_s",
                 "settle_s"},
}


def _interpolate(value):
    if isinstance(value, str):
        def repl(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset environment variable {name}")
            return os.environ[name]

        return _ENV_REF.sub(repl, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


def _check_keys(section: str, table: dict, schema_key: str | None = None) -> None:
    allowed = _SCHEMA[schema_key if schema_key is not None else section]
    unknown = set(table) - allowed
    if unknown:
        where = section or "top level"
        raise ConfigError(f"unknown config keys in [{where}]: {sorted(unknown)}")


def parse_config_text(text: str) -> dict:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config TOML: {exc}") from None
    doc = _interpolate(doc)

    known_sections = {"run", "dataset", "loop", "decoding", "synthesis", "judging",
                      "curation", "executor", "inference", "providers"}
    _check_keys("", {k: v for k, v in doc.items() if not isinstance(v, dict)})
    unknown_sections = {k for k, v in doc.items()
                        if isinstance(v, dict) and k not in known_sections}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    return doc


def _build_provider(name: str, cfg: dict, samples_per_call: int):
    _check_keys(f"providers.{name}", cfg, "provider")
    kind = cfg.get("kind", "mock")
    if kind == "http":
        if "base_url" not in cfg:
            raise ConfigError(f"provider {name!r} needs base_url")
        return HttpProvider(name=name, base_url=cfg["base_url"],
                            model=cfg.get("model"),
                            api_key_env=cfg.get("api_key_env"),
                            timeout=float(cfg.get("timeout_s", 120.0)))
    if kind != "mock":
        raise ConfigError(f"provider {name!r} has unknown kind {kind!r}")
    provider = MockProvider(seed=int(cfg.get("seed", 0)), name=name,
                            settle_s=float(cfg.get("settle_s", 0.0)))
    behavior = cfg.get("behavior", "pseudo_text")
    if behavior == "synthesizer":
        n = int(cfg.get("samples_per_call", samples_per_call))
        provider.add_rule(r".", synthesizer_responder(n, int(cfg.get("seed", 0))))
    elif behavior == "judge_capability":
        provider.add_rule(r".", capability_judge_responder())
    elif behavior == "judge_constant":
        provider.add_rule(r".", constant_judge_responder(
            int(cfg.get("precision", 80)), int(cfg.get("similarity", 60))))
    elif behavior != "pseudo_text":
        raise ConfigError(f"provider {name!r} has unknown behavior {behavior!r}")
    return provider


def build_stack(text: str, base_dir: str | Path = ".",
                seed_override: int | None = None) -> RunStack:
    """Assemble every component for a run from one config document.

    ``seed_override`` replaces the config's run seed before any seeded
    component is constructed, so overridden runs stay internally consistent
    (and resumable: resume re-applies the seed recorded in run state).
    """
    doc = parse_config_text(text)
    base = Path(base_dir)

    for section in ("dataset", "loop"):
        if section not in doc:
            raise ConfigError(f"config is missing required [{section}] section")

    run_cfg = doc.get("run", {})
    _check_keys("run", run_cfg)
    seed = int(run_cfg.get("seed", 0)) if seed_override is None else seed_override
    max_in_flight = int(run_cfg.get("max_in_flight", 8))

    ds_cfg = doc["dataset"]
    _check_keys("dataset", ds_cfg)
    for key in ("path", "task", "train_count"):
        if key not in ds_cfg:
            raise ConfigError(f"[dataset] is missing {key!r}")
    dataset_path = str(base / ds_cfg["path"]) if not Path(ds_cfg["path"]).is_absolute() \
        else ds_cfg["path"]

    loop_cfg = dict(doc["loop"])
    _check_keys("loop", loop_cfg)
    for key in ("epsilon_mean", "epsilon_coverage"):
        if key not in loop_cfg:
            raise ConfigError(f"[loop] is missing {key!r}; thresholds are mandatory")
    loop = LoopConfig(
        epsilon_mean=float(loop_cfg["epsilon_mean"]),
        epsilon_coverage=float(loop_cfg["epsilon_coverage"]),
        zeta=_num(loop_cfg.get("zeta", 50)),
        zeta_list=tuple(_num(z) for z in loop_cfg.get("zeta_list", (50, 70))),
        gate_metric=loop_cfg.get("gate_metric", "precision"),
        max_cycles=int(loop_cfg.get("max_cycles", 9)),
        volume_schedule=tuple(int(v) for v in loop_cfg.get("volume_schedule",
                                                           DEFAULT_VOLUME_SCHEDULE)),
        k=int(loop_cfg.get("k", 4)),
        m_repeats=int(loop_cfg.get("m_repeats", 10)),
        samples_per_call=int(loop_cfg.get("samples_per_call", 4)),
        max_in_flight=max_in_flight,
        over_request_factor=float(loop_cfg.get("over_request_factor", 1.25)),
    )

    decoding_cfg = doc.get("decoding", {})
    _check_keys("decoding", decoding_cfg)
    decoding = DecodingParams(
        temperature=float(decoding_cfg.get("temperature", 0.7)),
        top_p=float(decoding_cfg.get("top_p", 0.95)),
        max_new_tokens=int(decoding_cfg.get("max_new_tokens", 1024)))

    synth_cfg = doc.get("synthesis", {})
    _check_keys("synthesis", synth_cfg)
    generator_model = synth_cfg.get("generator_model", "mock-gen")
    template_ref = synth_cfg.get("template", "builtin")
    if template_ref == "builtin":
        synthesis_template = builtin_template(ds_cfg["task"])
    else:
        synthesis_template = load_template(base / template_ref, ds_cfg["task"])

    judge_cfg = doc.get("judging", {})
    _check_keys("judging", judge_cfg)
    judge_model = judge_cfg.get("judge_model", "mock-judge")
    judge_ref = judge_cfg.get("template", "builtin")
    judge_template = (builtin_judge_template() if judge_ref == "builtin"
                      else load_judge_template(base / judge_ref))

    cur_cfg = doc.get("curation", {})
    _check_keys("curation", cur_cfg)
    curation = CurationConfig(
        minhash=MinHashParams(
            num_hashes=int(cur_cfg.get("num_hashes", 128)),
            shingle_size=int(cur_cfg.get("shingle_size", 3)),
            lsh_bands=int(cur_cfg.get("lsh_bands", 32)),
            lsh_rows=int(cur_cfg.get("lsh_rows", 4)),
            jaccard_threshold=float(cur_cfg.get("jaccard_threshold", 0.8)),
            hash_seed=int(cur_cfg.get("hash_seed", 1))),
        rules=QualityRules(
            min_response_tokens=int(cur_cfg.get("min_response_tokens", 3)),
            max_repeated_fourgram_ratio=float(
                cur_cfg.get("max_repeated_fourgram_ratio", 0.3))),
        decontam_threshold=float(cur_cfg.get("decontam_threshold", 0.7)))

    exec_cfg = doc.get("executor", {"kind": "mock"})
    _check_keys("executor", exec_cfg)
    spec_cfg = exec_cfg.get("spec", {})
    _check_keys("executor.spec", spec_cfg, "executor.spec")
    executor_spec = ExecutorSpec(**spec_cfg) if spec_cfg else ExecutorSpec()
    exec_kind = exec_cfg.get("kind", "mock")
    if exec_kind == "mock":
        executor = MockTrainer(seed=seed, profile=CapabilityProfile(
            cap_max=float(exec_cfg.get("capability_max", 100.0)),
            half_life=float(exec_cfg.get("capability_half_life", 2000.0))))
    elif exec_kind == "command":
        executor = CommandExecutor(list(exec_cfg.get("command", [])),
                                   timeout_s=float(exec_cfg.get("timeout_s", 24 * 3600)))
    else:
        raise ConfigError(f"unknown executor kind {exec_kind!r}")

    gateway = Gateway(retry=RetryPolicy(), ledger=UsageLedger(),
                      requests_per_second=None)
    providers_cfg = doc.get("providers", {})
    for name, cfg in providers_cfg.items():
        gateway.register(name, _build_provider(name, dict(cfg), loop.samples_per_call))

    infer_cfg = doc.get("inference", {"kind": "mock"})
    _check_keys("inference", infer_cfg)
    infer_kind = infer_cfg.get("kind", "mock")
    if infer_kind == "mock":
        inference_backend = MockInferenceBackend(seed=int(infer_cfg.get("seed", seed)))
    elif infer_kind == "gateway":
        if "model_id" not in infer_cfg:
            raise ConfigError("[inference] gateway kind needs model_id")
        inference_backend = GatewayInferenceBackend(gateway, infer_cfg["model_id"],
                                                    max_in_flight=max_in_flight)
    elif infer_kind == "command":
        inference_backend = CommandInferenceBackend(
            list(infer_cfg.get("command", [])),
            timeout_s=float(infer_cfg.get("timeout_s", 3600)))
    else:
        raise ConfigError(f"unknown inference kind {infer_kind!r}")

    return RunStack(
        loop=loop, gateway=gateway, executor=executor,
        inference_backend=inference_backend,
        synthesis_template=synthesis_template, judge_template=judge_template,
        executor_spec=executor_spec, curation=curation, decoding=decoding,
        dataset_path=dataset_path, task=ds_cfg["task"],
        train_count=int(ds_cfg["train_count"]),
        split_seed=int(ds_cfg.get("split_seed", seed)),
        seed=seed, generator_model=generator_model, judge_model=judge_model,
        run_id=run_cfg.get("run_id"), config_text=text)


def load_stack(path: str | Path, seed_override: int | None = None) -> RunStack:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return build_stack(path.read_text("utf-8"), base_dir=path.parent,
                       seed_override=seed_override)


def _num(value) -> float | int:
    f = float(value)
    return int(f) if f.is_integer() else f


CONFIG_TEMPLATE = """\
# relaytune run configuration
schema = "relaytune/run-config@1"

[run]
seed = 7                    # one seed drives every stage (split, synth, decode)
max_in_flight = 8           # provider concurrency cap

[dataset]
path = "coverage.jsonl"     # one JSON record per line; see README for schema
task = "summarization"      # summarization | classification | coding | closed_qa | other
train_count = 395           # explicit split size (seeded shuffle, prefix take)
split_seed = 7

[loop]
epsilon_mean = 70           # mean-score gate, 0-100 (mandatory, task-specific)
epsilon_coverage = 0.8      # coverage gate at the zeta below, 0-1 (mandatory)
zeta = 50
zeta_list = [50, 70]
gate_metric = "precision"   # precision | similarity | both
max_cycles = 9
# volume_schedule defaults to [1000, 2000, 4000, ..., 256000]
k = 4                       # responses per held-out prompt
m_repeats = 10              # judge repeats per response
samples_per_call = 4

[decoding]
temperature = 0.7
top_p = 0.95
max_new_tokens = 1024

[synthesis]
template = "builtin"        # or a path to a $instruction/$response/$num_samples file
generator_model = "mock-gen"

[judging]
template = "builtin"
judge_model = "mock-judge"

[curation]
jaccard_threshold = 0.8
decontam_threshold = 0.7

[executor]
kind = "mock"               # mock | command (e.g. ["node", "trainer/dist/cli.js"])
capability_half_life = 2000

[inference]
kind = "mock"               # mock | command | gateway

[providers.mock-gen]
kind = "mock"
seed = 1
behavior = "synthesizer"

[providers.mock-judge]
kind = "mock"
seed = 2
behavior = "judge_capability"

# Real service example:
# [providers.api-main]
# kind = "http"
# base_url = "https://api.example.com/v1"
# api_key_env = "EXAMPLE_API_KEY"   # name of the env var holding the key
# model = "big-model-v4"
"""
