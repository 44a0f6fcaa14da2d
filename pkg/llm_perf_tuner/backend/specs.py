"""
Model, parallelism and platform specifications
Validation, derived schedule quantities, memory feasibility and config-file I/O
"""
import enum
import math
import os
from dataclasses import dataclass, asdict, replace
from typing import Optional, Tuple

import yaml

from .config import Config
from .errors import GpuCountMismatch, InvalidSpec, NonDivisibleBatch, NonDivisibleLayers
from .utils import get_logger

logger = get_logger('specs')

TOPOLOGIES = ('pcie', 'nvlink', 'nvswitch')
PRECISIONS = (1, 2, 4)


class ModelKind(str, enum.Enum):
    DENSE_GPT = 'dense-gpt'
    MOE = 'moe'


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a GPT or GPT-MoE model"""
    kind: ModelKind
    param_count: int
    layers: int
    hidden: int
    seq_len: int
    global_batch: int
    attn_heads: int = 1
    vocab_size: int = 0
    precision_bytes: int = 2
    moe_expert_interval: int = 2
    moe_top_k_max: int = 2
    name: str = ''

    @property
    def is_moe(self):
        return self.kind == ModelKind.MOE

    @property
    def expert_layers(self):
        """Number of expert (MoE) layers, zero for dense models"""
        return self.layers // self.moe_expert_interval if self.is_moe else 0

    def check(self):
        """Raise InvalidSpec when a field is out of range"""
        for field_name in ('param_count', 'layers', 'hidden', 'seq_len', 'global_batch',
                           'attn_heads', 'moe_expert_interval', 'moe_top_k_max'):
            if getattr(self, field_name) < 1:
                raise InvalidSpec(f"model.{field_name} must be >= 1", field=field_name)
        if self.vocab_size < 0:
            raise InvalidSpec("model.vocab_size must be >= 0", field='vocab_size')
        if self.precision_bytes not in PRECISIONS:
            raise InvalidSpec(f"model.precision_bytes must be one of {PRECISIONS}",
                              field='precision_bytes')
        if self.is_moe and self.layers % self.moe_expert_interval:
            raise InvalidSpec("model.layers must be divisible by moe_expert_interval",
                              field='moe_expert_interval')


@dataclass(frozen=True)
class ParallelismConfig:
    """Parallel degrees, micro-batch size and interleave factor"""
    pp: int
    tp: int
    dp: int
    ep: int = 1
    micro_batch: int = 1
    interleave: int = 1

    @property
    def world_size(self):
        return self.pp * self.tp * self.dp

    def check(self):
        for field_name in ('pp', 'tp', 'dp', 'ep', 'micro_batch', 'interleave'):
            if getattr(self, field_name) < 1:
                raise InvalidSpec(f"parallel.{field_name} must be >= 1", field=field_name)

    def label(self):
        return f"(t={self.tp},p={self.pp},d={self.dp},b={self.micro_batch})"


@dataclass(frozen=True)
class DerivedParams:
    micro_batches: int
    layers_per_stage: int
    params_per_gpu: float


@dataclass(frozen=True)
class PlatformSpec:
    """Hardware shape of the training cluster"""
    machines: int
    gpus_per_machine: int
    peak_flops: float
    gpu_mem_bytes: float
    intra_topology: str
    nics_per_machine: int = 1
    nic_bw_bytes: float = 12.5e9
    name: str = ''

    @property
    def total_gpus(self):
        return self.machines * self.gpus_per_machine

    def check(self):
        if self.machines < 1 or self.gpus_per_machine < 1:
            raise InvalidSpec("platform machines and gpus_per_machine must be >= 1")
        if self.peak_flops <= 0:
            raise InvalidSpec("platform.peak_flops must be > 0", field='peak_flops')
        if self.gpu_mem_bytes <= 0:
            raise InvalidSpec("platform.gpu_mem_bytes must be > 0", field='gpu_mem_bytes')
        if self.intra_topology not in TOPOLOGIES:
            raise InvalidSpec(f"platform.intra_topology must be one of {TOPOLOGIES}",
                              field='intra_topology')

    def resized(self, total_gpus):
        """
        Same machine type with a different machine count

        Args:
            total_gpus: GPUs the resized cluster must hold

        Returns:
            PlatformSpec with total_gpus GPUs; a partial machine when total_gpus < gpus_per_machine
        """
        if total_gpus < self.gpus_per_machine:
            return replace(self, machines=1, gpus_per_machine=total_gpus)
        if total_gpus % self.gpus_per_machine:
            raise GpuCountMismatch(
                f"{total_gpus} GPUs do not fill whole machines of {self.gpus_per_machine}",
                total_gpus=total_gpus, gpus_per_machine=self.gpus_per_machine)
        return replace(self, machines=total_gpus // self.gpus_per_machine)


def validate(model, parallel, platform):
    """
    Validate a model/parallelism/platform triple

    Args:
        model: ModelSpec
        parallel: ParallelismConfig
        platform: PlatformSpec

    Returns:
        DerivedParams with m, layers per stage and parameters per GPU
    """
    model.check()
    parallel.check()
    platform.check()

    d, b = parallel.dp, parallel.micro_batch
    if model.global_batch % (d * b):
        raise NonDivisibleBatch(
            f"global batch {model.global_batch} is not divisible by d*b = {d * b}",
            global_batch=model.global_batch, dp=d, micro_batch=b)

    chunks = parallel.pp * parallel.interleave
    if model.layers % chunks:
        raise NonDivisibleLayers(
            f"{model.layers} layers do not split into p*v = {chunks} chunks",
            layers=model.layers, pp=parallel.pp, interleave=parallel.interleave)

    if parallel.world_size != platform.total_gpus:
        raise GpuCountMismatch(
            f"p*t*d = {parallel.world_size} but the platform has {platform.total_gpus} GPUs",
            world_size=parallel.world_size, total_gpus=platform.total_gpus)

    if model.is_moe:
        if parallel.ep > parallel.dp or parallel.dp % parallel.ep:
            raise InvalidSpec(f"expert parallel degree {parallel.ep} must divide d = {parallel.dp}",
                              field='ep')
    elif parallel.ep != 1:
        raise InvalidSpec("dense models require ep = 1", field='ep')

    return DerivedParams(
        micro_batches=model.global_batch // (d * b),
        layers_per_stage=model.layers // parallel.pp,
        params_per_gpu=model.param_count / (parallel.pp * parallel.tp),
    )


def estimate_param_count(l, h, vocab_size=0, s=None):
    """
    Rough GPT parameter count 12*l*h^2 + vocab*h

    Position embeddings are not counted; s is only range-checked.
    """
    if l < 1 or h < 1:
        raise InvalidSpec("layers and hidden must be >= 1")
    if s is not None and s < 1:
        raise InvalidSpec("seq_len must be >= 1")
    return 12 * l * h * h + vocab_size * h


def estimate_memory_per_gpu(model, parallel):
    """
    Bytes resident on one GPU: weights and optimizer state plus stage activations

    Args:
        model: ModelSpec
        parallel: ParallelismConfig

    Returns:
        Estimated bytes
    """
    t, p, b = parallel.tp, parallel.pp, parallel.micro_batch
    s, h = model.seq_len, model.hidden
    params_per_gpu = model.param_count / (p * t)
    per_layer = s * b * h * (Config.ACT_LINEAR_COEF + Config.ACT_ATTN_COEF * model.attn_heads * s / h) / t
    return params_per_gpu * Config.BYTES_PER_PARAM + per_layer * (model.layers / p)


def check_memory(model, parallel, platform):
    """Return (estimated bytes, fits in platform memory)"""
    needed = estimate_memory_per_gpu(model, parallel)
    return needed, needed <= platform.gpu_mem_bytes


# ---------------------------------------------------------------------------
# Config file I/O

_MODEL_KEYS = {
    'layers': 'layers', 'hidden': 'hidden', 'seq_len': 'seq_len',
    'global_batch': 'global_batch', 'attn_heads': 'attn_heads', 'vocab_size': 'vocab_size',
    'precision_bytes': 'precision_bytes', 'moe_expert_interval': 'moe_expert_interval',
    'moe_top_k_max': 'moe_top_k_max',
}
_PARALLEL_KEYS = ('tp', 'pp', 'dp', 'ep', 'micro_batch', 'interleave')
_PLATFORM_INT_KEYS = ('machines', 'gpus_per_machine', 'nics_per_machine')
_PLATFORM_FLOAT_KEYS = ('peak_flops', 'gpu_mem_bytes', 'nic_bw_bytes')


def _number(value, key, integer=True):
    """Coerce yaml scalars such as '989e12' into numbers"""
    if isinstance(value, bool):
        raise InvalidSpec(f"{key} must be numeric", field=key)
    if isinstance(value, str):
        try:
            value = float(value.strip())
        except ValueError:
            raise InvalidSpec(f"{key} must be numeric, got {value!r}", field=key)
    if not isinstance(value, (int, float)):
        raise InvalidSpec(f"{key} must be numeric", field=key)
    if integer:
        if float(value) != math.floor(float(value)):
            raise InvalidSpec(f"{key} must be an integer, got {value}", field=key)
        return int(value)
    return float(value)


def _require(section, key, prefix):
    if key not in section:
        raise InvalidSpec(f"missing required key {prefix}.{key}", field=f"{prefix}.{key}")
    return section[key]


def specs_from_dict(doc):
    """
    Build specs from a parsed config document

    Args:
        doc: dict with model, parallel and platform sections

    Returns:
        (ModelSpec, ParallelismConfig, PlatformSpec)
    """
    if not isinstance(doc, dict):
        raise InvalidSpec("config document must be a mapping")
    model_doc = doc.get('model') or {}
    parallel_doc = doc.get('parallel') or {}
    platform_doc = doc.get('platform') or {}

    model_kwargs = {}
    for key in ('layers', 'hidden', 'seq_len', 'global_batch'):
        model_kwargs[key] = _number(_require(model_doc, key, 'model'), f"model.{key}")
    for key, field_name in _MODEL_KEYS.items():
        if key in model_doc and field_name not in model_kwargs:
            model_kwargs[field_name] = _number(model_doc[key], f"model.{key}")
    model_kwargs.setdefault('attn_heads', max(1, model_kwargs['hidden'] // 128))

    kind_value = model_doc.get('kind', ModelKind.DENSE_GPT.value)
    try:
        kind = ModelKind(kind_value)
    except ValueError:
        raise InvalidSpec(f"model.kind must be one of {[k.value for k in ModelKind]}", field='model.kind')

    params = _require(model_doc, 'params', 'model')
    if isinstance(params, str) and params.strip().lower() == 'auto':
        params = estimate_param_count(model_kwargs['layers'], model_kwargs['hidden'],
                                      model_kwargs.get('vocab_size', 0), model_kwargs['seq_len'])
        logger.info("model.params estimated as %d", params)
    model = ModelSpec(kind=kind, param_count=_number(params, 'model.params'),
                      name=str(model_doc.get('name', '')), **model_kwargs)

    parallel_kwargs = {}
    for key in _PARALLEL_KEYS:
        if key in parallel_doc:
            parallel_kwargs[key] = _number(parallel_doc[key], f"parallel.{key}")
    for key in ('tp', 'pp', 'dp'):
        if key not in parallel_kwargs:
            raise InvalidSpec(f"missing required key parallel.{key}", field=f"parallel.{key}")
    parallel = ParallelismConfig(**parallel_kwargs)

    platform_kwargs = {}
    for key in _PLATFORM_INT_KEYS:
        if key in platform_doc:
            platform_kwargs[key] = _number(platform_doc[key], f"platform.{key}")
    for key in _PLATFORM_FLOAT_KEYS:
        if key in platform_doc:
            platform_kwargs[key] = _number(platform_doc[key], f"platform.{key}", integer=False)
    for key in ('machines', 'gpus_per_machine', 'peak_flops', 'gpu_mem_bytes'):
        if key not in platform_kwargs:
            raise InvalidSpec(f"missing required key platform.{key}", field=f"platform.{key}")
    platform = PlatformSpec(intra_topology=str(_require(platform_doc, 'intra_topology', 'platform')),
                            name=str(platform_doc.get('name', '')), **platform_kwargs)
    return model, parallel, platform


def load_config(path):
    """Read a YAML config file into (ModelSpec, ParallelismConfig, PlatformSpec)"""
    if not os.path.exists(path):
        raise InvalidSpec(f"config file not found: {path}", path=path)
    with open(path, 'r') as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise InvalidSpec(f"config file is not valid YAML: {e}", path=path)
    return specs_from_dict(doc)


def config_to_dict(model, parallel, platform):
    """Normalized config document; feeding it back reproduces the same specs"""
    model_doc = asdict(model)
    model_doc['kind'] = model.kind.value
    model_doc['params'] = model_doc.pop('param_count')
    return {
        'model': model_doc,
        'parallel': asdict(parallel),
        'platform': asdict(platform),
    }


def dump_config(model, parallel, platform):
    """YAML text of the normalized config"""
    return yaml.safe_dump(config_to_dict(model, parallel, platform), sort_keys=True)


# ---------------------------------------------------------------------------
# Reference models and platforms

GB = 1024 ** 3
GPT_VOCAB = 50257

REFERENCE_MODELS = {
    'gpt-1.5b': ModelSpec(ModelKind.DENSE_GPT, 1_500_000_000, 48, 1600, 1024, 512,
                          attn_heads=16, vocab_size=GPT_VOCAB, name='gpt-1.5b'),
    'gpt-3b': ModelSpec(ModelKind.DENSE_GPT, 3_000_000_000, 54, 2000, 1024, 512,
                        attn_heads=20, vocab_size=GPT_VOCAB, name='gpt-3b'),
    'gpt-39b': ModelSpec(ModelKind.DENSE_GPT, 39_000_000_000, 48, 8192, 2048, 1536,
                         attn_heads=64, vocab_size=GPT_VOCAB, name='gpt-39b'),
    'gpt-76b': ModelSpec(ModelKind.DENSE_GPT, 76_000_000_000, 60, 10240, 2048, 1792,
                         attn_heads=80, vocab_size=GPT_VOCAB, name='gpt-76b'),
    'gpt-145b': ModelSpec(ModelKind.DENSE_GPT, 145_000_000_000, 80, 12288, 2048, 2304,
                          attn_heads=96, vocab_size=GPT_VOCAB, name='gpt-145b'),
    'moe-1.3b': ModelSpec(ModelKind.MOE, 1_300_000_000, 24, 2048, 2048, 256,
                          attn_heads=16, vocab_size=GPT_VOCAB, name='moe-1.3b'),
}

# (t, p, d) layouts the reference models were trained with; 76B uses (4, 4, 4)
# because 60 layers do not split over 8 stages
REFERENCE_LAYOUTS = {
    'gpt-1.5b': (2, 4, 2),
    'gpt-3b': (2, 2, 2),
    'gpt-39b': (4, 4, 2),
    'gpt-76b': (4, 4, 4),
    'gpt-145b': (8, 8, 1),
}

_PLATFORM_SHAPES = {
    'geforce': dict(gpus_per_machine=8, peak_flops=71e12, gpu_mem_bytes=24 * GB,
                    intra_topology='pcie', nics_per_machine=1, nic_bw_bytes=12.5e9),
    'tesla-pcie': dict(gpus_per_machine=8, peak_flops=112e12, gpu_mem_bytes=32 * GB,
                       intra_topology='pcie', nics_per_machine=1, nic_bw_bytes=12.5e9),
    'tesla-nvlink': dict(gpus_per_machine=4, peak_flops=112e12, gpu_mem_bytes=32 * GB,
                         intra_topology='nvlink', nics_per_machine=2, nic_bw_bytes=12.5e9),
    'hopper': dict(gpus_per_machine=8, peak_flops=989e12, gpu_mem_bytes=80 * GB,
                   intra_topology='nvswitch', nics_per_machine=8, nic_bw_bytes=50e9),
}


def reference_platform(name, machines):
    """Reference platform with the given machine count"""
    if name not in _PLATFORM_SHAPES:
        raise InvalidSpec(f"unknown platform {name!r}; known: {sorted(_PLATFORM_SHAPES)}")
    return PlatformSpec(machines=machines, name=name, **_PLATFORM_SHAPES[name])


def reference_setup(model_name, micro_batch=1, platform_name='hopper') -> Tuple[ModelSpec, ParallelismConfig, PlatformSpec]:
    """Reference model with its published layout on a matching platform"""
    model = REFERENCE_MODELS[model_name]
    t, p, d = REFERENCE_LAYOUTS[model_name]
    platform = reference_platform(platform_name, 1)
    platform = platform.resized(t * p * d)
    return model, ParallelismConfig(pp=p, tp=t, dp=d, micro_batch=micro_batch), platform


def describe(model, parallel, platform, derived: Optional[DerivedParams] = None):
    """One-line summary for logs"""
    text = (f"{model.name or model.kind.value} l={model.layers} h={model.hidden} s={model.seq_len} "
            f"g={model.global_batch} {parallel.label()} on {platform.machines}x{platform.gpus_per_machine} "
            f"{platform.intra_topology}")
    if derived is not None:
        text += f" m={derived.micro_batches}"
    return text
