"""Five-zone lumped-capacitance office building used as the data oracle.

One thermal capacitance per zone, conductive coupling to outdoors and to
adjacent zones, window solar gains with interior shading, internal gains
from occupants, equipment and lights, wind-and-stack window ventilation and
an ideal-loads thermostat. Setpoints follow a multi-level pseudo-random
sequence during occupied hours and windows follow a pseudo-random binary
signal, so the recorded dataset excites every input the model sees.

Physics steps at ``inner_step_s`` (1 minute by default) with explicit Euler;
rows are sampled every 15 minutes.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import date

import numpy as np
import pandas as pd

from errors import ConfigurationError, DatasetSchemaError, SimulationError, WeatherParseError

logger = logging.getLogger(__name__)

RHO_AIR = 1.2  # kg/m3
CP_AIR = 1005.0  # J/kgK
GRAVITY = 9.81
STEP_MINUTES = 15
STEPS_PER_DAY = 24 * 60 // STEP_MINUTES
ZONE_COUNT = 5
WINDOW_COUNT = 4
T_GUARD = (-50.0, 60.0)

WEATHER_COLUMNS = ["t_out_c", "rh_pct", "wind_mps", "dni_wm2", "dhi_wm2"]
WEATHER_INTERVALS = {
    "t_out_c": (-30.0, 40.0),
    "rh_pct": (0.0, 100.0),
    "wind_mps": (0.0, 25.0),
    "dni_wm2": (0.0, 1300.0),
    "dhi_wm2": (0.0, 1300.0),
}

DATASET_COLUMNS = (
    ["t_out", "h_out", "w_out", "l_norm", "l_hor", "hol"]
    + [f"occu_{i}" for i in range(1, 6)]
    + [f"e_{i}" for i in range(1, 6)]
    + [f"ws_{i}" for i in range(1, 5)]
    + [f"sp_heat_{i}" for i in range(1, 6)]
    + [f"sp_cool_{i}" for i in range(1, 6)]
    + [f"t_in_{i}" for i in range(1, 6)]
)

DEFAULT_HOLIDAYS = [
    "2023-01-02", "2023-04-07", "2023-04-10", "2023-05-01",
    "2023-05-29", "2023-08-28", "2023-12-25", "2023-12-26",
]


@dataclass
class SimulatorConfig:
    days: int = 365
    start: str = "2023-01-01"
    p_open: float = 0.05
    mprs_hold_max_steps: int = 16
    inner_step_s: float = 60.0
    latitude_deg: float = 45.0
    initial_t_in: float = 20.0
    weather_csv: str = ""
    holidays: list = field(default_factory=lambda: list(DEFAULT_HOLIDAYS))
    vent_c_w: float = 0.3
    vent_c_d: float = 0.6
    vent_delta_h: float = 0.8
    window_open_area_m2: float = 1.0
    vent_min_indoor_c: float = 16.0
    hvac_heating_w_per_m2: float = 150.0
    hvac_cooling_w_per_m2: float = 150.0
    occupant_gain_w: float = 100.0
    lighting_w_per_m2: float = 8.0

    def validate(self):
        if self.days < 1:
            raise ConfigurationError("must be at least 1", field="simulator.days")
        if not 0.0 <= self.p_open <= 1.0:
            raise ConfigurationError("must lie in [0, 1]", field="simulator.p_open")
        if self.mprs_hold_max_steps < 1:
            raise ConfigurationError("must be at least 1", field="simulator.mprs_hold_max_steps")
        if self.inner_step_s <= 0 or (STEP_MINUTES * 60) % self.inner_step_s:
            raise ConfigurationError("must be positive and divide 900 s", field="simulator.inner_step_s")
        if not -90.0 <= self.latitude_deg <= 90.0:
            raise ConfigurationError("must lie in [-90, 90]", field="simulator.latitude_deg")
        for name in ("vent_c_w", "vent_c_d", "vent_delta_h", "window_open_area_m2"):
            if getattr(self, name) < 0:
                raise ConfigurationError("must be non-negative", field=f"simulator.{name}")
        for name in ("hvac_heating_w_per_m2", "hvac_cooling_w_per_m2"):
            if getattr(self, name) <= 0:
                raise ConfigurationError("must be positive", field=f"simulator.{name}")
        try:
            pd.Timestamp(self.start)
            [date.fromisoformat(d) for d in self.holidays]
        except ValueError as e:
            raise ConfigurationError(str(e), field="simulator.start/holidays") from None


# ---------------------------------------------------------------------------
# building description
# ---------------------------------------------------------------------------

@dataclass
class ZoneThermal:
    name: str
    floor_area: float
    volume: float
    capacitance: float
    ua_ext: float
    window_area: float
    facade_azimuth: float  # degrees clockwise from north; nan for the core
    heating_capacity_w: float
    cooling_capacity_w: float
    max_occupants: int

    @property
    def has_window(self) -> bool:
        return self.window_area > 0


@dataclass
class BuildingSpec:
    length_m: float = 30.0
    width_m: float = 15.0
    height_m: float = 2.4
    perimeter_depth_m: float = 4.5
    u_ext: float = 2.8
    u_int: float = 1.6
    u_window: float = 0.7
    window_to_wall: float = 0.2
    g_value: float = 0.4
    shade_factor: float = 0.3
    shade_threshold_c: float = 23.0
    mass_factor: float = 5.0
    # an open window in cold wind outruns these, so T_in drops while it is open
    hvac_heating_w_per_m2: float = 150.0
    hvac_cooling_w_per_m2: float = 150.0
    occupant_gain_w: float = 100.0
    lighting_w_per_m2: float = 8.0
    window_open_area_m2: float = 1.0
    vent_c_w: float = 0.3
    vent_c_d: float = 0.6
    vent_delta_h: float = 0.8
    # window ventilation stops below this indoor temperature
    vent_min_indoor_c: float = 16.0
    latitude_deg: float = 45.0

    @classmethod
    def from_config(cls, cfg: SimulatorConfig) -> "BuildingSpec":
        return cls(
            hvac_heating_w_per_m2=cfg.hvac_heating_w_per_m2,
            hvac_cooling_w_per_m2=cfg.hvac_cooling_w_per_m2,
            occupant_gain_w=cfg.occupant_gain_w,
            lighting_w_per_m2=cfg.lighting_w_per_m2,
            window_open_area_m2=cfg.window_open_area_m2,
            vent_c_w=cfg.vent_c_w,
            vent_c_d=cfg.vent_c_d,
            vent_delta_h=cfg.vent_delta_h,
            vent_min_indoor_c=cfg.vent_min_indoor_c,
            latitude_deg=cfg.latitude_deg,
        )

    def validate(self):
        for name in ("length_m", "width_m", "height_m", "perimeter_depth_m", "u_ext", "u_int",
                     "u_window", "mass_factor", "hvac_heating_w_per_m2", "hvac_cooling_w_per_m2"):
            if getattr(self, name) <= 0:
                raise ConfigurationError("must be positive", field=f"building.{name}")
        if 2 * self.perimeter_depth_m >= min(self.length_m, self.width_m):
            raise ConfigurationError("perimeter zones leave no core", field="building.perimeter_depth_m")

    def zones(self) -> list:
        """Zones 1-4 face S, E, N, W; zone 5 is the core"""
        self.validate()
        p, h = self.perimeter_depth_m, self.height_m
        facades = [("south", self.length_m, 180.0), ("east", self.width_m, 90.0),
                   ("north", self.length_m, 0.0), ("west", self.width_m, 270.0)]
        zones = []
        for name, facade, azimuth in facades:
            area = (facade + facade - 2 * p) / 2 * p
            wall = facade * h
            window = self.window_to_wall * wall
            zones.append(self._zone(name, area, (wall - window) * self.u_ext + window * self.u_window,
                                    window, azimuth))
        core = (self.length_m - 2 * p) * (self.width_m - 2 * p)
        zones.append(self._zone("core", core, 0.0, 0.0, float("nan")))
        return zones

    def _zone(self, name: str, area: float, ua_ext: float, window: float, azimuth: float) -> ZoneThermal:
        volume = area * self.height_m
        return ZoneThermal(
            name=name,
            floor_area=area,
            volume=volume,
            capacitance=self.mass_factor * RHO_AIR * CP_AIR * volume,
            ua_ext=ua_ext,
            window_area=window,
            facade_azimuth=azimuth,
            heating_capacity_w=self.hvac_heating_w_per_m2 * area,
            cooling_capacity_w=self.hvac_cooling_w_per_m2 * area,
            max_occupants=int(min(30, area // 10)),
        )

    def adjacency(self) -> list:
        """Per zone, a list of (neighbor index, UA) pairs; symmetric"""
        p, h = self.perimeter_depth_m, self.height_m
        links = {}
        diagonal = p * math.sqrt(2.0) * h * self.u_int
        for i in range(4):
            j = (i + 1) % 4
            links[(i, j)] = diagonal
        links[(0, 4)] = links[(2, 4)] = (self.length_m - 2 * p) * h * self.u_int
        links[(1, 4)] = links[(3, 4)] = (self.width_m - 2 * p) * h * self.u_int
        adjacency = [[] for _ in range(ZONE_COUNT)]
        for (i, j), ua in sorted(links.items()):
            adjacency[i].append((j, ua))
            adjacency[j].append((i, ua))
        return adjacency


# ---------------------------------------------------------------------------
# state and per-step inputs
# ---------------------------------------------------------------------------

@dataclass
class ZoneState:
    t_in: float
    shade_active: bool = False
    window_open: bool = False
    hvac_power: float = 0.0  # W, positive heats


@dataclass
class WeatherRecord:
    timestamp: pd.Timestamp
    t_out: float
    rh: float
    wind_speed: float
    direct_normal: float
    diffuse_horizontal: float


@dataclass
class ZoneInputs:
    occupants: float = 0.0
    equipment_w: float = 0.0
    lights_on: bool = False
    window_open: bool = False
    facade_irradiance_wm2: float = 0.0
    heat_sp: float = 15.0
    cool_sp: float = 30.0


@dataclass
class ZoneFluxes:
    envelope: float
    interzone: float
    solar: float
    internal: float
    ventilation: float
    hvac: float

    @property
    def total(self) -> float:
        return self.envelope + self.interzone + self.solar + self.internal + self.ventilation + self.hvac


@dataclass
class ScheduleSet:
    occupancy: pd.DataFrame  # occu_1..5
    equipment: pd.DataFrame  # e_1..5, W
    lighting: pd.Series
    holiday: pd.Series


@dataclass
class ExcitationSignals:
    heat_sp: pd.DataFrame  # sp_heat_1..5
    cool_sp: pd.DataFrame  # sp_cool_1..5
    windows: pd.DataFrame  # ws_1..4


@dataclass
class SimulatedDataset:
    frame: pd.DataFrame
    metadata: dict = field(default_factory=dict)
    weather: pd.DataFrame = None  # raw weather the run was driven by, when known

    def __len__(self) -> int:
        return len(self.frame)


# ---------------------------------------------------------------------------
# physics
# ---------------------------------------------------------------------------

def ventilation_flow(a_open, wind, t_in, t_out, c_w: float = 0.3, c_d: float = 0.6, delta_h: float = 0.8):
    """Wind-and-stack flow through an open area, m3/s"""
    if np.any(np.asarray(a_open) < 0):
        raise ConfigurationError("open area must be non-negative", field="a_open")
    q_wind = c_w * a_open * wind
    q_stack = c_d * a_open * np.sqrt(2.0 * GRAVITY * delta_h * np.abs(t_in - t_out) / (t_in + 273.15))
    return np.sqrt(q_wind ** 2 + q_stack ** 2)


def zone_fluxes(state: ZoneState, zone: ZoneThermal, neighbors: list, weather: WeatherRecord,
                inputs: ZoneInputs, spec: BuildingSpec, hvac_power: float = 0.0) -> ZoneFluxes:
    """Heat flows into the zone in W; ``neighbors`` is a list of (UA, T_j)"""
    t_in, t_out = state.t_in, weather.t_out
    shade = t_out > spec.shade_threshold_c
    solar = spec.g_value * zone.window_area * inputs.facade_irradiance_wm2 * (spec.shade_factor if shade else 1.0)
    internal = (inputs.occupants * spec.occupant_gain_w + inputs.equipment_w
                + (spec.lighting_w_per_m2 * zone.floor_area if inputs.lights_on else 0.0))
    ventilation = 0.0
    if inputs.window_open and zone.has_window and t_in >= spec.vent_min_indoor_c:
        flow = ventilation_flow(spec.window_open_area_m2, weather.wind_speed, t_in, t_out,
                                spec.vent_c_w, spec.vent_c_d, spec.vent_delta_h)
        ventilation = RHO_AIR * CP_AIR * float(flow) * (t_out - t_in)
    return ZoneFluxes(
        envelope=zone.ua_ext * (t_out - t_in),
        interzone=sum(ua * (t_j - t_in) for ua, t_j in neighbors),
        solar=solar,
        internal=internal,
        ventilation=ventilation,
        hvac=hvac_power,
    )


def temperature_rate(state: ZoneState, zone: ZoneThermal, neighbors: list, weather: WeatherRecord,
                     inputs: ZoneInputs, spec: BuildingSpec, hvac_power: float = 0.0) -> float:
    """dT/dt in K/s"""
    return zone_fluxes(state, zone, neighbors, weather, inputs, spec, hvac_power).total / zone.capacitance


def step_zone(state: ZoneState, zone: ZoneThermal, neighbors: list, weather: WeatherRecord, inputs: ZoneInputs,
              dt: float, spec: BuildingSpec, hvac_enabled: bool = True, step: int = None) -> ZoneState:
    """One explicit-Euler step.

    The thermostat is proportional with gain C/dt: it supplies exactly the
    power that lands the zone on the violated setpoint at the end of the
    step, clipped to the zone's capacity.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive", field="dt")
    free = zone_fluxes(state, zone, neighbors, weather, inputs, spec).total
    t_free = state.t_in + free * dt / zone.capacitance
    hvac = 0.0
    if hvac_enabled:
        if t_free < inputs.heat_sp:
            hvac = min(zone.capacitance * (inputs.heat_sp - t_free) / dt, zone.heating_capacity_w)
        elif t_free > inputs.cool_sp:
            hvac = -min(zone.capacitance * (t_free - inputs.cool_sp) / dt, zone.cooling_capacity_w)
    t_next = state.t_in + (free + hvac) * dt / zone.capacitance
    if not T_GUARD[0] <= t_next <= T_GUARD[1] or not math.isfinite(t_next):
        raise SimulationError(f"zone {zone.name} temperature diverged to {t_next:.2f} C", step=step)
    return ZoneState(
        t_in=t_next,
        shade_active=weather.t_out > spec.shade_threshold_c,
        window_open=bool(inputs.window_open and zone.has_window),
        hvac_power=hvac,
    )


def sun_vector(timestamps: pd.DatetimeIndex, latitude_deg: float) -> np.ndarray:
    """Unit vectors (east, north, up) toward the sun, clock time taken as solar time"""
    phi = math.radians(latitude_deg)
    doy = timestamps.dayofyear.to_numpy()
    hours = timestamps.hour.to_numpy() + timestamps.minute.to_numpy() / 60.0
    decl = np.radians(23.45) * np.sin(2 * np.pi * (284 + doy) / 365.0)
    omega = np.radians(15.0 * (hours - 12.0))
    east = -np.cos(decl) * np.sin(omega)
    north = np.cos(phi) * np.sin(decl) - np.sin(phi) * np.cos(decl) * np.cos(omega)
    up = np.sin(phi) * np.sin(decl) + np.cos(phi) * np.cos(decl) * np.cos(omega)
    return np.stack([east, north, up], axis=-1)


def facade_irradiance(weather: pd.DataFrame, azimuths: list, latitude_deg: float) -> np.ndarray:
    """[N, facades] irradiance on vertical facades: beam plus half the diffuse"""
    sun = sun_vector(weather.index, latitude_deg)
    out = np.zeros((len(weather), len(azimuths)))
    above = sun[:, 2] > 0
    for k, az in enumerate(azimuths):
        a = math.radians(az)
        cos_inc = sun[:, 0] * math.sin(a) + sun[:, 1] * math.cos(a)
        beam = weather["dni_wm2"].to_numpy() * np.clip(cos_inc, 0.0, None) * above
        out[:, k] = beam + 0.5 * weather["dhi_wm2"].to_numpy()
    return out


# ---------------------------------------------------------------------------
# weather
# ---------------------------------------------------------------------------

def _index(start: str, steps: int) -> pd.DatetimeIndex:
    return pd.date_range(pd.Timestamp(start), periods=steps, freq=f"{STEP_MINUTES}min", name="timestamp")


def synth_weather(rng: np.random.Generator, days: int, start: str = "2023-01-01",
                  latitude_deg: float = 45.0) -> pd.DataFrame:
    """Seasonal plus diurnal temperature with AR(1) noise, half-sine daylight
    irradiance attenuated by a daily cloud draw, reflected AR(1) wind."""
    if days < 1:
        raise ConfigurationError("must be at least 1", field="days")
    n = days * STEPS_PER_DAY
    index = _index(start, n)
    doy = index.dayofyear.to_numpy()
    hours = index.hour.to_numpy() + index.minute.to_numpy() / 60.0

    seasonal = 11.0 - 9.0 * np.cos(2 * np.pi * (doy - 20) / 365.0)
    diurnal = -4.0 * np.cos(2 * np.pi * (hours - 3.0) / 24.0)
    noise = np.empty(n)
    level = 0.0
    for t, e in enumerate(rng.normal(0.0, 0.15, n)):
        level = 0.99 * level + e
        noise[t] = level
    t_out = seasonal + diurnal + noise

    # daylight window from the sunset hour angle at this latitude
    decl = np.radians(23.45) * np.sin(2 * np.pi * (284 + doy) / 365.0)
    cos_ws = np.clip(-math.tan(math.radians(latitude_deg)) * np.tan(decl), -1.0, 1.0)
    half_day = np.degrees(np.arccos(cos_ws)) / 15.0
    sunrise, sunset = 12.0 - half_day, 12.0 + half_day
    daylight = np.where((hours > sunrise) & (hours < sunset),
                        np.sin(np.pi * (hours - sunrise) / np.maximum(sunset - sunrise, 1e-9)), 0.0)
    clearness = np.repeat(rng.uniform(0.15, 1.0, days), STEPS_PER_DAY)
    dni = 850.0 * clearness * daylight
    dhi = (60.0 + 140.0 * (1.0 - clearness)) * daylight

    wind = np.empty(n)
    w = 3.0
    for t, e in enumerate(rng.normal(0.0, 0.25, n)):
        w = abs(w + 0.02 * (3.0 - w) + e)
        wind[t] = w

    rh = 70.0 - 2.5 * diurnal - 1.0 * (seasonal - 11.0) + rng.normal(0.0, 3.0, n)

    frame = pd.DataFrame({
        "t_out_c": t_out, "rh_pct": rh, "wind_mps": wind, "dni_wm2": dni, "dhi_wm2": dhi,
    }, index=index)
    for col, (lo, hi) in WEATHER_INTERVALS.items():
        frame[col] = frame[col].clip(lo, hi)
    return frame


def weather_records(frame: pd.DataFrame) -> list:
    return [WeatherRecord(ts, *values) for ts, *values in frame[WEATHER_COLUMNS].itertuples(name=None)]


def write_weather_csv(frame: pd.DataFrame, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    out = frame[WEATHER_COLUMNS].copy()
    out.index = out.index.strftime("%Y-%m-%dT%H:%M:%S")
    out.index.name = "timestamp"
    out.to_csv(path, float_format="%.6f", lineterminator="\n")


def load_weather_csv(path: str) -> pd.DataFrame:
    """Read and validate ``timestamp,t_out_c,rh_pct,wind_mps,dni_wm2,dhi_wm2``"""
    try:
        raw = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise WeatherParseError(f"cannot read {path}: {e}") from None
    for col in ["timestamp"] + WEATHER_COLUMNS:
        if col not in raw.columns:
            raise WeatherParseError(f"missing column {col!r} in {path}")
    # file rows are 1-based with the header on row 1
    stamps = pd.to_datetime(raw["timestamp"], errors="coerce")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        raise WeatherParseError(f"unparseable timestamp {raw['timestamp'].iloc[bad[0]]!r}", row=int(bad[0]) + 2)
    steps = stamps.diff().iloc[1:].to_numpy()
    off = np.flatnonzero(steps != np.timedelta64(STEP_MINUTES, "m"))
    if off.size:
        i = int(off[0]) + 1
        kind = "non-monotone timestamp" if steps[off[0]] <= np.timedelta64(0, "m") else "gap in 15-minute cadence"
        raise WeatherParseError(f"{kind} at {raw['timestamp'].iloc[i]}", row=i + 2)
    values = raw[WEATHER_COLUMNS].apply(pd.to_numeric, errors="coerce")
    for col in WEATHER_COLUMNS:
        lo, hi = WEATHER_INTERVALS[col]
        v = values[col].to_numpy()
        bad = np.flatnonzero(~((v >= lo) & (v <= hi)))
        if bad.size:
            raise WeatherParseError(f"{col}={raw[col].iloc[bad[0]]} outside [{lo}, {hi}]", row=int(bad[0]) + 2)
    values.index = pd.DatetimeIndex(stamps, name="timestamp")
    logger.info(f"Loaded {len(values)} weather records from {path}")
    return values


# ---------------------------------------------------------------------------
# calendar, schedules, excitation signals
# ---------------------------------------------------------------------------

def generate_calendar(start: str, days: int, holidays: list = ()) -> pd.DataFrame:
    """Per 15-minute step: holiday, working day, occupied hours (working day 07:00-19:00)"""
    index = _index(start, days * STEPS_PER_DAY)
    holiday_dates = {date.fromisoformat(d) for d in holidays}
    holiday = np.array([d in holiday_dates for d in index.date])
    working = (index.dayofweek.to_numpy() < 5) & ~holiday
    hours = index.hour.to_numpy()
    occupied = working & (hours >= 7) & (hours < 19)
    return pd.DataFrame({"holiday": holiday, "working": working, "occupied": occupied}, index=index)


def generate_schedules(rng: np.random.Generator, calendar: pd.DataFrame, spec: BuildingSpec) -> ScheduleSet:
    """Two-state stochastic occupancy with arrival 07-09h, departure 16-19h and a lunch dip"""
    zones = spec.zones()
    n = len(calendar)
    hours = calendar.index.hour.to_numpy() + calendar.index.minute.to_numpy() / 60.0
    day_ids = (np.arange(n) // STEPS_PER_DAY)
    working_day = calendar["working"].to_numpy().reshape(-1, STEPS_PER_DAY)[:, 0]
    occupancy = np.zeros((n, ZONE_COUNT))
    for z, zone in enumerate(zones):
        arrival = rng.uniform(7.0, 9.0, len(working_day))
        departure = rng.uniform(16.0, 19.0, len(working_day))
        present = working_day[day_ids] & (hours >= arrival[day_ids]) & (hours < departure[day_ids])
        lunch = (hours >= 12.0) & (hours < 13.0)
        p = np.where(lunch, 0.4, 0.85)
        draws = rng.binomial(zone.max_occupants, p)
        occupancy[:, z] = np.where(present, draws, 0)
    equipment = np.minimum(40.0 + 80.0 * occupancy, 1000.0)
    index = calendar.index
    return ScheduleSet(
        occupancy=pd.DataFrame(occupancy, index=index, columns=[f"occu_{i}" for i in range(1, 6)]),
        equipment=pd.DataFrame(equipment, index=index, columns=[f"e_{i}" for i in range(1, 6)]),
        lighting=calendar["occupied"].astype(bool),
        holiday=calendar["holiday"].astype(bool),
    )


MPRS_LEVELS = np.arange(18.0, 22.0 + 1e-9, 0.5)
SETBACK = (15.0, 30.0)
COOLING_OFFSET = 5.0


def generate_mprs_setpoints(rng: np.random.Generator, calendar: pd.DataFrame,
                            hold_max_steps: int = 16) -> tuple:
    """Heating/cooling setpoints per zone: random 0.5 C levels in [18, 22] held for
    1..hold_max_steps steps during occupied hours, setback (15, 30) otherwise."""
    occupied = calendar["occupied"].to_numpy()
    n = len(occupied)
    heat = np.full((n, ZONE_COUNT), SETBACK[0])
    cool = np.full((n, ZONE_COUNT), SETBACK[1])
    for z in range(ZONE_COUNT):
        hold, level = 0, SETBACK[0]
        for t in range(n):
            if not occupied[t]:
                hold = 0
                continue
            if hold == 0:
                level = float(rng.choice(MPRS_LEVELS))
                hold = int(rng.integers(1, hold_max_steps + 1))
            heat[t, z] = level
            cool[t, z] = level + COOLING_OFFSET
            hold -= 1
    index = calendar.index
    return (pd.DataFrame(heat, index=index, columns=[f"sp_heat_{i}" for i in range(1, 6)]),
            pd.DataFrame(cool, index=index, columns=[f"sp_cool_{i}" for i in range(1, 6)]))


def generate_prbs_windows(rng: np.random.Generator, calendar: pd.DataFrame, p_open: float,
                          pulse_steps: int = 2) -> pd.DataFrame:
    """Window signals: every step outside an open pulse triggers an opening with
    probability ``p_open``; an opening lasts exactly ``pulse_steps`` steps (30
    minutes). Steps inside a pulse draw nothing."""
    if not 0.0 <= p_open <= 1.0:
        raise ConfigurationError("must lie in [0, 1]", field="p_open")
    n = len(calendar)
    signals = np.zeros((n, WINDOW_COUNT), dtype=int)
    draws = rng.random((n, WINDOW_COUNT))
    for w in range(WINDOW_COUNT):
        remaining = 0
        for t in range(n):
            if remaining == 0 and draws[t, w] < p_open:
                remaining = pulse_steps
            if remaining:
                signals[t, w] = 1
                remaining -= 1
    return pd.DataFrame(signals, index=calendar.index, columns=[f"ws_{i}" for i in range(1, 5)])


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate(spec: BuildingSpec, weather: pd.DataFrame, schedules: ScheduleSet, signals: ExcitationSignals,
             duration: int = None, inner_step_s: float = 60.0, initial_t_in: float = 20.0) -> SimulatedDataset:
    """Run the building over ``duration`` 15-minute steps and record every dataset column"""
    duration = len(weather) if duration is None else duration
    lengths = {
        "weather": len(weather), "occupancy": len(schedules.occupancy), "equipment": len(schedules.equipment),
        "lighting": len(schedules.lighting), "holiday": len(schedules.holiday),
        "heat_sp": len(signals.heat_sp), "cool_sp": len(signals.cool_sp), "windows": len(signals.windows),
    }
    if len(set(lengths.values())) != 1 or duration > len(weather) or duration < 1:
        raise ConfigurationError(f"series lengths {lengths} do not cover duration {duration}", field="duration")
    if inner_step_s <= 0 or (STEP_MINUTES * 60) % inner_step_s:
        raise ConfigurationError("must be positive and divide 900 s", field="inner_step_s")

    zones = spec.zones()
    adjacency = spec.adjacency()
    substeps = int(round(STEP_MINUTES * 60 / inner_step_s))
    weather = weather.iloc[:duration]
    records = weather_records(weather)
    irradiance = facade_irradiance(weather, [z.facade_azimuth for z in zones[:4]], spec.latitude_deg)
    occupancy = schedules.occupancy.to_numpy()[:duration]
    equipment = schedules.equipment.to_numpy()[:duration]
    lighting = schedules.lighting.to_numpy()[:duration]
    heat_sp = signals.heat_sp.to_numpy()[:duration]
    cool_sp = signals.cool_sp.to_numpy()[:duration]
    windows = signals.windows.to_numpy()[:duration]

    states = [ZoneState(t_in=initial_t_in) for _ in zones]
    t_in = np.empty((duration, ZONE_COUNT))
    logger.info(f"Simulating {duration} steps with {substeps} sub-steps of {inner_step_s:g} s")
    for t in range(duration):
        t_in[t] = [s.t_in for s in states]
        inputs = [
            ZoneInputs(
                occupants=occupancy[t, z],
                equipment_w=equipment[t, z],
                lights_on=bool(lighting[t]),
                window_open=bool(windows[t, z]) if z < WINDOW_COUNT else False,
                facade_irradiance_wm2=irradiance[t, z] if z < WINDOW_COUNT else 0.0,
                heat_sp=heat_sp[t, z],
                cool_sp=cool_sp[t, z],
            )
            for z in range(ZONE_COUNT)
        ]
        for _ in range(substeps):
            temps = [s.t_in for s in states]
            states = [
                step_zone(states[z], zones[z], [(ua, temps[j]) for j, ua in adjacency[z]], records[t],
                          inputs[z], inner_step_s, spec, step=t)
                for z in range(ZONE_COUNT)
            ]

    frame = pd.DataFrame({
        "t_out": weather["t_out_c"].to_numpy(),
        "h_out": weather["rh_pct"].to_numpy(),
        "w_out": weather["wind_mps"].to_numpy(),
        "l_norm": weather["dni_wm2"].to_numpy(),
        "l_hor": weather["dhi_wm2"].to_numpy(),
        "hol": schedules.holiday.to_numpy()[:duration].astype(int),
    }, index=weather.index)
    for z in range(ZONE_COUNT):
        frame[f"occu_{z + 1}"] = occupancy[:, z]
    for z in range(ZONE_COUNT):
        frame[f"e_{z + 1}"] = equipment[:, z]
    for w in range(WINDOW_COUNT):
        frame[f"ws_{w + 1}"] = windows[:, w].astype(int)
    for z in range(ZONE_COUNT):
        frame[f"sp_heat_{z + 1}"] = heat_sp[:, z]
    for z in range(ZONE_COUNT):
        frame[f"sp_cool_{z + 1}"] = cool_sp[:, z]
    for z in range(ZONE_COUNT):
        frame[f"t_in_{z + 1}"] = t_in[:, z]
    frame.index.name = "timestamp"
    return SimulatedDataset(frame=frame[DATASET_COLUMNS], metadata={"rows": duration, "inner_step_s": inner_step_s})


def generate_dataset(cfg: SimulatorConfig, seed: int) -> SimulatedDataset:
    """Weather, schedules, excitation signals and simulation from one seed"""
    cfg.validate()
    spec = BuildingSpec.from_config(cfg)
    weather_seq, schedule_seq, mprs_seq, prbs_seq = np.random.SeedSequence(seed).spawn(4)
    if cfg.weather_csv:
        weather = load_weather_csv(cfg.weather_csv)
        if len(weather) < cfg.days * STEPS_PER_DAY:
            raise ConfigurationError(f"{cfg.weather_csv} covers {len(weather)} steps, need {cfg.days * STEPS_PER_DAY}",
                                     field="simulator.weather_csv")
        weather = weather.iloc[:cfg.days * STEPS_PER_DAY]
        start = str(weather.index[0])
    else:
        weather = synth_weather(np.random.default_rng(weather_seq), cfg.days, cfg.start, cfg.latitude_deg)
        start = cfg.start
    calendar = generate_calendar(start, cfg.days, cfg.holidays)
    calendar.index = weather.index
    schedules = generate_schedules(np.random.default_rng(schedule_seq), calendar, spec)
    heat, cool = generate_mprs_setpoints(np.random.default_rng(mprs_seq), calendar, cfg.mprs_hold_max_steps)
    windows = generate_prbs_windows(np.random.default_rng(prbs_seq), calendar, cfg.p_open)
    dataset = simulate(spec, weather, schedules, ExcitationSignals(heat, cool, windows),
                       inner_step_s=cfg.inner_step_s, initial_t_in=cfg.initial_t_in)
    dataset.metadata.update({"seed": seed, "days": cfg.days})
    dataset.weather = weather
    return dataset


def write_dataset_csv(dataset: SimulatedDataset, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    out = dataset.frame[DATASET_COLUMNS].copy()
    out.index = out.index.strftime("%Y-%m-%dT%H:%M:%S")
    out.index.name = "timestamp"
    out.to_csv(path, float_format="%.6f", lineterminator="\n")
    logger.info(f"Wrote {len(out)} rows to {path}")


def read_dataset_csv(path: str, required: list = None) -> SimulatedDataset:
    """Read a dataset CSV; columns are found by header name, order is irrelevant"""
    try:
        raw = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetSchemaError(f"cannot read {path}: {e}") from None
    required = DATASET_COLUMNS if required is None else required
    for col in ["timestamp"] + list(required):
        if col not in raw.columns:
            raise DatasetSchemaError(f"missing column {col!r} in {path}", column=col)
    stamps = pd.to_datetime(raw["timestamp"], errors="coerce")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        raise DatasetSchemaError("unparseable timestamp", column="timestamp", row=int(bad[0]) + 2)
    values = raw[[c for c in raw.columns if c != "timestamp"]].apply(pd.to_numeric, errors="coerce")
    nan_rows = np.flatnonzero(values[list(required)].isna().any(axis=1).to_numpy())
    if nan_rows.size:
        row = int(nan_rows[0])
        column = values[list(required)].columns[values[list(required)].iloc[row].isna().to_numpy()][0]
        raise DatasetSchemaError(f"non-numeric value in {column!r}", column=column, row=row + 2)
    values.index = pd.DatetimeIndex(stamps, name="timestamp")
    return SimulatedDataset(frame=values, metadata={"rows": len(values), "path": path})
