"""
Pydantic V2 models for regret-forge configuration and result records.
Array-carrying records allow numpy arrays; everything else is plain validated data.
"""

import math
from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, field_validator, model_validator


def _split_list(value):
    """Accept '1, 5' style strings from flat config files."""
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


def _decode_lambda(value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("inf", "infinity")):
        return math.inf
    return value


# Infinite knowledgeability serializes to the JSON string "inf".
Lambda = Annotated[
    float,
    BeforeValidator(_decode_lambda),
    PlainSerializer(lambda v: "inf" if v == math.inf else v, when_used="json"),
]


class AgentKind(str, Enum):
    """Agents the harness can run."""
    UNINFORMED = "urlsvi"
    PARTIALLY_INFORMED = "pirlsvi"
    INFORMED = "irlsvi"
    IPSRL = "ipsrl"


class BetaMode(str, Enum):
    """How an RLSVI agent obtains the deliberateness it plugs into the IL loss."""
    KNOWN = "known"
    ENTROPY = "entropy"
    MISSPECIFIED = "misspecified"


class DeepSeaSpec(BaseModel):
    """Deep Sea of size M: states (x, d) in {0..M}^2, horizon M."""
    model_config = ConfigDict(populate_by_name=True)

    size: int = Field(..., alias="M", ge=2, description="Grid size M; also the horizon")
    move_cost: Optional[float] = Field(None, description="Reward of a right move at h < H (default -0.1/M)")
    bonus: float = Field(default=1.0, description="Terminal reward at (M, M)")
    slip: Optional[float] = Field(None, ge=0.0, lt=1.0, description="Probability a right move stays put (default 1/M)")

    @property
    def resolved_move_cost(self) -> float:
        return -0.1 / self.size if self.move_cost is None else self.move_cost

    @property
    def resolved_slip(self) -> float:
        return 1.0 / self.size if self.slip is None else self.slip


class EnvConfig(BaseModel):
    """Environment selection for experiments."""
    model_config = ConfigDict(populate_by_name=True)

    kind: Literal["deep_sea", "random"] = Field(default="deep_sea", description="Environment family")
    M: int = Field(default=10, ge=2, description="Deep Sea size")
    slip: Optional[float] = Field(None, ge=0.0, lt=1.0, description="Deep Sea slip override")
    S: int = Field(default=2, ge=1, description="Random MDP state count")
    A: int = Field(default=2, ge=1, description="Random MDP action count")
    H: int = Field(default=2, ge=1, description="Random MDP horizon")
    margin: float = Field(default=0.1, gt=0.0, description="Certified minimum action gap")
    env_seed: int = Field(default=0, ge=0, description="Seed of the random environment")
    n_hypotheses: int = Field(default=4, ge=1, description="Hypothesis count for ipsrl runs")

    def describe(self) -> str:
        if self.kind == "deep_sea":
            return f"deep_sea,M={self.M}"
        return f"random,S={self.S},A={self.A},H={self.H},margin={self.margin},seed={self.env_seed}"


class Competence(BaseModel):
    """Expert competence (beta, lambda) and the exponential prior rate over beta."""
    model_config = ConfigDict(populate_by_name=True)

    beta: float = Field(..., ge=0.0, description="Deliberateness; 0 is uniform play")
    lambda_: Lambda = Field(default=math.inf, alias="lambda", gt=0.0, description="Knowledgeability; inf is exact Q*")
    lambda2: float = Field(default=1.0, gt=0.0, description="Rate of the exponential prior over beta")


class DatasetMetadata(BaseModel):
    """Provenance of an offline dataset."""
    model_config = ConfigDict(populate_by_name=True)

    env: str = Field(default="", description="Environment description")
    beta: float = Field(..., ge=0.0, description="Expert deliberateness used for generation")
    lambda_: Lambda = Field(default=math.inf, alias="lambda", description="Expert knowledgeability")
    kappa: Optional[float] = Field(None, ge=0.0, description="Data ratio, when sized from one")
    seed: Optional[int] = Field(None, description="Seed of the generating stream")
    num_states: int = Field(..., ge=1, description="S of the generating environment")
    num_actions: int = Field(..., ge=1, description="A of the generating environment")
    horizon: int = Field(..., ge=1, description="H of the generating environment")


class RlsviConfig(BaseModel):
    """Hyperparameters of the bootstrapped RLSVI agent family."""
    model_config = ConfigDict(populate_by_name=True)

    sigma0_sq: float = Field(default=1.0, gt=0.0, description="Prior variance of Q^prior entries")
    sigma_sq: float = Field(default=0.1, gt=0.0, description="Variance of target noise")
    buffer_B: int = Field(default=20, ge=1, description="Offline tuples sampled per resample for the IL loss")
    agent_kind: AgentKind = Field(default=AgentKind.INFORMED, description="uRLSVI, piRLSVI or iRLSVI")
    beta_mode: BetaMode = Field(default=BetaMode.KNOWN, description="Source of the agent's beta")
    beta_value: Optional[float] = Field(None, ge=0.0, description="Beta for known/misspecified modes")
    c0: float = Field(default=1.0, gt=0.0, description="Entropy estimator constant")
    beta_max: float = Field(default=1e4, gt=0.0, description="Clamp of the entropy estimate")
    alpha: float = Field(default=0.5, ge=0.0, le=1.0, description="RL/IL interpolation; 0.5 is the equal-weight loss")
    use_full_map_loss: bool = Field(default=False, description="Exp(1) IL weights over all of D0, lambda2*beta, beta search")
    lambda2: float = Field(default=1.0, gt=0.0, description="Exponential prior rate over beta (full MAP loss)")
    beta_search_upper: float = Field(default=100.0, gt=0.0, description="Upper end of the beta search interval")
    map_rounds: int = Field(default=3, ge=1, description="Alternations of Q and beta updates")
    solver_tol: float = Field(default=1e-8, gt=0.0, description="Gradient tolerance of row solves")
    solver_max_iters: int = Field(default=100, ge=1, description="Newton iteration cap of row solves")

    @model_validator(mode='after')
    def _check_kind(self):
        if self.agent_kind == AgentKind.IPSRL:
            raise ValueError("ipsrl is not an RLSVI agent kind")
        if self.beta_mode in (BetaMode.KNOWN, BetaMode.MISSPECIFIED) and self.beta_value is None:
            raise ValueError(f"beta_mode={self.beta_mode.value} requires beta_value")
        return self


class RegretCurve(BaseModel):
    """Per-episode and cumulative regret of one run."""
    model_config = ConfigDict(arbitrary_types_allowed=True, populate_by_name=True)

    per_episode: np.ndarray = Field(..., description="V*_0 minus realized return, one entry per episode")
    cumulative: np.ndarray = Field(..., description="Prefix sums of per_episode")
    seed: int = Field(default=0, description="Seed index of the run")
    agent: str = Field(default="", description="Agent label")
    config: Dict[str, Any] = Field(default_factory=dict, description="Snapshot of the run configuration")

    @field_validator('per_episode', 'cumulative', mode='before')
    @classmethod
    def _as_array(cls, value):
        return np.asarray(value, dtype=float)

    @model_validator(mode='after')
    def _check_prefix_sums(self):
        if self.per_episode.shape != self.cumulative.shape:
            raise ValueError("per_episode and cumulative differ in length")
        if not np.allclose(np.cumsum(self.per_episode), self.cumulative, rtol=0.0, atol=1e-9):
            raise ValueError("cumulative is not the prefix sum of per_episode")
        return self

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if len(self.cumulative) else 0.0

    @classmethod
    def from_returns(cls, optimal_value: float, returns, seed: int = 0, agent: str = "",
                     config: Optional[Dict[str, Any]] = None) -> "RegretCurve":
        per_episode = optimal_value - np.asarray(returns, dtype=float)
        return cls(per_episode=per_episode, cumulative=np.cumsum(per_episode),
                   seed=seed, agent=agent, config=config or {})


class SummaryRow(BaseModel):
    """Aggregated cumulative regret of one agent at one grid point."""
    model_config = ConfigDict(populate_by_name=True)

    agent: str
    beta: float
    kappa: float
    beta_tilde: Optional[float] = None
    mean_cumreg_T: float
    stderr: float
    n_seeds: int
    n_failed: int = 0
    status: Literal["ok", "incomplete", "single_seed", "empty"] = "ok"


class SummaryTable(BaseModel):
    """Rows feeding the regret-vs-beta, misspecification and regret-vs-episode plots."""
    model_config = ConfigDict(populate_by_name=True)

    rows: List[SummaryRow] = Field(default_factory=list)

    def lookup(self, agent: str, beta: float, kappa: float, beta_tilde: Optional[float] = None) -> SummaryRow:
        for row in self.rows:
            if row.agent == agent and row.beta == beta and row.kappa == kappa and row.beta_tilde == beta_tilde:
                return row
        raise KeyError((agent, beta, kappa, beta_tilde))


class EpsilonReport(BaseModel):
    """Monte-Carlo estimates of first-episode policy error against the closed-form bound."""
    model_config = ConfigDict(populate_by_name=True)

    L: int = Field(..., ge=0, description="Offline episodes per trial")
    mc_estimate_pi_tilde: float = Field(..., ge=0.0, le=1.0, description="Pr(first sampled policy != pi*)")
    mc_estimate_pi_hat: float = Field(..., ge=0.0, le=1.0, description="Pr(count estimator != pi*)")
    bound_eps_L: float = Field(..., ge=0.0, le=1.0, description="Closed-form epsilon_L")
    n_trials: int = Field(..., ge=1, description="Monte-Carlo trials")
    se_pi_tilde: float = Field(default=0.0, ge=0.0)
    se_pi_hat: float = Field(default=0.0, ge=0.0)


class PolicyErrorReport(BaseModel):
    """Pr(pi~^k != pi*) for episodes k = 1..K."""
    model_config = ConfigDict(populate_by_name=True)

    L: int = Field(..., ge=0)
    frequencies: List[float] = Field(..., description="Mistake frequency per episode")
    standard_errors: List[float] = Field(..., description="Standard error per episode")
    n_trials: int = Field(..., ge=1)


class ExperimentConfig(BaseModel):
    """A sweep over (beta, kappa, beta_tilde) grid points and seeds."""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    env: EnvConfig = Field(default_factory=EnvConfig, description="Environment")
    agents: List[AgentKind] = Field(
        default_factory=lambda: [AgentKind.INFORMED, AgentKind.PARTIALLY_INFORMED, AgentKind.UNINFORMED],
        description="Agents run on every (grid point, seed)",
    )
    T: int = Field(default=300, ge=1, description="Episodes per run")
    n_seeds: int = Field(default=50, ge=1, description="Simulations per grid point")
    kappa_grid: List[float] = Field(default_factory=lambda: [5.0], min_length=1, description="Data ratios")
    beta_grid: List[float] = Field(default_factory=lambda: [10.0], min_length=1, description="Expert deliberateness values")
    beta_tilde_grid: Optional[List[float]] = Field(None, description="Agent-side beta; None means the true beta")
    expert_lambda: Lambda = Field(default=math.inf, gt=0.0, description="Expert knowledgeability")
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64, description="Root of all child streams")
    output_dir: str = Field(default="results", description="Directory for CSV and JSON outputs")
    threads: Optional[int] = Field(None, ge=1, description="Worker pool size")
    dataset_path: Optional[str] = Field(None, description="Reuse a stored offline dataset for every seed")

    # agent hyperparameters
    sigma0_sq: float = Field(default=1.0, gt=0.0)
    sigma_sq: float = Field(default=0.1, gt=0.0)
    buffer_B: int = Field(default=20, ge=1)
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    beta_mode: BetaMode = Field(default=BetaMode.KNOWN)
    c0: float = Field(default=1.0, gt=0.0)
    use_full_map_loss: bool = Field(default=False)
    lambda2: float = Field(default=1.0, gt=0.0)

    @field_validator('agents', 'kappa_grid', 'beta_grid', 'beta_tilde_grid', mode='before')
    @classmethod
    def _lists(cls, value):
        return _split_list(value)

    @model_validator(mode='after')
    def _check_agents(self):
        if not self.agents:
            raise ValueError("agent list must be nonempty")
        if self.beta_tilde_grid is not None and not self.beta_tilde_grid:
            raise ValueError("beta_tilde_grid must be nonempty when given")
        if self.beta_tilde_grid is not None and self.beta_mode == BetaMode.ENTROPY:
            raise ValueError("beta_tilde_grid has no effect when beta_mode is entropy")
        if AgentKind.IPSRL in self.agents and self.env.kind != "random":
            raise ValueError("ipsrl runs need env kind 'random' (finite hypothesis set)")
        return self

    def rlsvi_config(self, kind: AgentKind, beta_value: float) -> RlsviConfig:
        mode = self.beta_mode
        if mode == BetaMode.KNOWN and self.beta_tilde_grid is not None:
            mode = BetaMode.MISSPECIFIED
        return RlsviConfig(
            sigma0_sq=self.sigma0_sq,
            sigma_sq=self.sigma_sq,
            buffer_B=self.buffer_B,
            agent_kind=kind,
            beta_mode=mode,
            beta_value=beta_value,
            c0=self.c0,
            alpha=self.alpha,
            use_full_map_loss=self.use_full_map_loss,
            lambda2=self.lambda2,
        )
