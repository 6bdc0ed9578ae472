//! Channel gains, transmission delays and transmit power control.
//!
//! Links use orthogonal sub-bands: a device talking to `fanout` peers in a
//! round splits its bandwidth evenly, so one link runs at
//! `rate = (W / fanout) log2(1 + p h / sigma^2)` bits per second. The gain
//! `h = rho / distance^2` combines square-law path loss with a unit-mean
//! exponential fading draw, redrawn once per round per unordered pair.
//!
//! Power control inverts the delay formula: the cheapest power meeting a
//! delay target `gamma` for `q` payload bits is
//! `p* = (sigma^2 / h) (2^(q fanout / (W gamma)) - 1)`. The exponent grows
//! linearly in payload and fanout; anything beyond [`MAX_RATE_EXPONENT`]
//! cannot be represented and is reported as an infeasible link.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

/// Exponent cap for `2^x` in the power inversion. Far beyond any plausible
/// link budget; hitting it means the delay target is hopeless.
pub const MAX_RATE_EXPONENT: f64 = 1000.0;

/// Distances below this floor (in meters) are clamped so the square-law
/// gain stays finite for co-located devices.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// Radio parameters shared by every link in an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    /// Bandwidth per device, Hz.
    pub bandwidth_hz: f64,
    /// Noise power sigma^2, W.
    pub noise_power_w: f64,
    /// Per-device transmit power budget, W.
    pub max_power_w: f64,
    /// Per-round delay target gamma, s.
    pub delay_target_s: f64,
    /// Wire width of one model parameter.
    pub bits_per_parameter: u32,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_power_w", self.noise_power_w),
            ("delay_target_s", self.delay_target_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        // A zero power budget is a valid way to say "no link is feasible".
        if !(self.max_power_w >= 0.0) || !self.max_power_w.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "max_power_w must be >= 0, got {}",
                self.max_power_w
            )));
        }
        if self.bits_per_parameter == 0 {
            return Err(Error::InvalidArgument("bits_per_parameter must be >= 1".into()));
        }
        Ok(())
    }

    /// Payload size in bits for a parameter count.
    pub fn payload_bits(&self, parameters: usize) -> f64 {
        parameters as f64 * f64::from(self.bits_per_parameter)
    }
}

/// Seeded device coordinates, uniform over a disc.
#[derive(Debug, Clone)]
pub struct DevicePlacement {
    positions: Vec<(f64, f64)>,
}

impl DevicePlacement {
    /// Draws `count` positions uniformly over a disc of `radius_m` meters:
    /// radius `R sqrt(u1)`, angle `2 pi u2`, one pair of uniforms per device
    /// in device order.
    pub fn generate(count: usize, radius_m: f64, seed: u64) -> Result<DevicePlacement> {
        if count == 0 {
            return Err(Error::InvalidArgument("placement needs at least one device".into()));
        }
        if !(radius_m > 0.0) || !radius_m.is_finite() {
            return Err(Error::InvalidArgument(format!("radius must be positive, got {radius_m}")));
        }
        let mut rng = Rng::new(seed);
        let positions = (0..count)
            .map(|_| {
                let r = radius_m * rng.uniform().sqrt();
                let theta = 2.0 * std::f64::consts::PI * rng.uniform();
                (r * theta.cos(), r * theta.sin())
            })
            .collect();
        Ok(DevicePlacement { positions })
    }

    pub fn from_positions(positions: Vec<(f64, f64)>) -> Result<DevicePlacement> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("placement needs at least one device".into()));
        }
        Ok(DevicePlacement { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, device: usize) -> (f64, f64) {
        self.positions[device]
    }

    /// Euclidean distance clamped to [`MIN_DISTANCE_M`].
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.positions[i];
        let (xj, yj) = self.positions[j];
        ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt().max(MIN_DISTANCE_M)
    }
}

/// Channel gain for the unordered pair `{i, j}` in `round`:
/// `h = rho / d^2` with `rho ~ Exponential(1)` drawn from the stream
/// `derive_seed(root_seed, "fading", [round, min(i,j), max(i,j)])`. Both
/// directions of a pair see the same gain within a round.
pub fn channel_gain(
    placement: &DevicePlacement,
    i: usize,
    j: usize,
    round: usize,
    root_seed: u64,
) -> Result<f64> {
    if i == j {
        return Err(Error::InvalidArgument(format!("device {i} has no channel to itself")));
    }
    if i >= placement.len() || j >= placement.len() {
        return Err(Error::InvalidArgument(format!(
            "pair ({i}, {j}) outside placement of {} devices",
            placement.len()
        )));
    }
    let (lo, hi) = (i.min(j) as u64, i.max(j) as u64);
    let mut rng = Rng::new(derive_seed(root_seed, "fading", &[round as u64, lo, hi]));
    let rho = rng.exponential();
    let d = placement.distance(i, j);
    Ok(rho / (d * d))
}

/// Delay in seconds to push `payload_bits` over one of `fanout` equal
/// sub-bands at transmit power `power_w`. Zero power or zero gain yields an
/// infinite delay (allowed and reported, not an error).
pub fn transmission_delay(
    payload_bits: f64,
    fanout: usize,
    gain: f64,
    power_w: f64,
    model: &ChannelModel,
) -> Result<f64> {
    model.validate()?;
    if fanout == 0 {
        return Err(Error::InvalidArgument("fanout must be >= 1".into()));
    }
    if !(payload_bits > 0.0) || !payload_bits.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "payload must be positive, got {payload_bits}"
        )));
    }
    if !(gain >= 0.0) || !(power_w >= 0.0) {
        return Err(Error::InvalidArgument("gain and power must be >= 0".into()));
    }
    let snr = power_w * gain / model.noise_power_w;
    if snr == 0.0 {
        return Ok(f64::INFINITY);
    }
    let rate = model.bandwidth_hz / fanout as f64 * (1.0 + snr).log2();
    Ok(payload_bits / rate)
}

/// Cheapest transmit power that meets the delay target for one link, from
/// inverting the delay formula. Errors with [`Error::InfeasibleLink`] when
/// the required rate exponent exceeds [`MAX_RATE_EXPONENT`] or the gain is
/// zero.
pub fn optimal_power(
    payload_bits: f64,
    fanout: usize,
    gain: f64,
    model: &ChannelModel,
) -> Result<f64> {
    model.validate()?;
    if fanout == 0 {
        return Err(Error::InvalidArgument("fanout must be >= 1".into()));
    }
    if !(payload_bits > 0.0) || !payload_bits.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "payload must be positive, got {payload_bits}"
        )));
    }
    let exponent = payload_bits * fanout as f64 / (model.bandwidth_hz * model.delay_target_s);
    if exponent > MAX_RATE_EXPONENT {
        return Err(Error::InfeasibleLink(format!(
            "rate exponent {exponent:.1} exceeds {MAX_RATE_EXPONENT}; delay target unreachable"
        )));
    }
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(Error::InfeasibleLink(format!("gain {gain} supports no positive rate")));
    }
    Ok(model.noise_power_w / gain * (exponent.exp2() - 1.0))
}

/// Power plan for all concurrent links of one device in one round.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    /// Optimal power per link, in the order given.
    pub link_powers_w: Vec<f64>,
    pub total_power_w: f64,
    /// True when every link can meet the delay target and the summed power
    /// fits the device budget.
    pub feasible: bool,
    /// Human-readable reason when infeasible.
    pub reason: Option<String>,
}

/// Checks whether one device can serve all its links this round.
///
/// `links` holds `(payload_bits, gain)` per link; the fanout is the number
/// of links, matching the even bandwidth split. A device with no links is
/// trivially feasible at zero power.
pub fn link_feasibility(links: &[(f64, f64)], model: &ChannelModel) -> Result<FeasibilityReport> {
    model.validate()?;
    if links.is_empty() {
        return Ok(FeasibilityReport {
            link_powers_w: Vec::new(),
            total_power_w: 0.0,
            feasible: true,
            reason: None,
        });
    }
    let fanout = links.len();
    let mut powers = Vec::with_capacity(fanout);
    for &(bits, gain) in links {
        match optimal_power(bits, fanout, gain, model) {
            Ok(p) => powers.push(p),
            Err(Error::InfeasibleLink(reason)) => {
                return Ok(FeasibilityReport {
                    link_powers_w: Vec::new(),
                    total_power_w: f64::INFINITY,
                    feasible: false,
                    reason: Some(reason),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let total: f64 = powers.iter().sum();
    let feasible = total <= model.max_power_w;
    Ok(FeasibilityReport {
        link_powers_w: powers,
        total_power_w: total,
        feasible,
        reason: if feasible {
            None
        } else {
            Some(format!(
                "summed link power {total:.3e} W exceeds budget {:.3e} W",
                model.max_power_w
            ))
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ChannelModel {
        ChannelModel {
            bandwidth_hz: 1e6,
            noise_power_w: 1e-9,
            max_power_w: 1.0,
            delay_target_s: 5.0,
            bits_per_parameter: 32,
        }
    }

    #[test]
    fn delay_hand_case() {
        // SNR 3 gives log2(4) = 2; half of 1 MHz at 2 bit/s/Hz moves
        // 100k parameters x 32 bits in 3.2 s.
        let m = model();
        let gain = 1.0;
        let power = 3.0 * m.noise_power_w / gain;
        let d = transmission_delay(m.payload_bits(100_000), 2, gain, power, &m).unwrap();
        assert!((d - 3.2).abs() < 1e-12, "delay {d}");
    }

    #[test]
    fn zero_power_is_infinite_delay() {
        let m = model();
        let d = transmission_delay(1000.0, 1, 1.0, 0.0, &m).unwrap();
        assert!(d.is_infinite());
        let d = transmission_delay(1000.0, 1, 0.0, 1.0, &m).unwrap();
        assert!(d.is_infinite());
    }

    #[test]
    fn optimal_power_hand_case() {
        // Exponent exactly 1 and gain equal to the noise power: p* = 1.
        let m = ChannelModel {
            bandwidth_hz: 100.0,
            noise_power_w: 0.25,
            max_power_w: 10.0,
            delay_target_s: 2.0,
            bits_per_parameter: 32,
        };
        let p = optimal_power(200.0, 1, 0.25, &m).unwrap();
        assert!((p - 1.0).abs() < 1e-12, "power {p}");
    }

    #[test]
    fn optimal_power_round_trips_to_the_delay_target() {
        let m = model();
        let mut rng = crate::rng::Rng::new(99);
        for _ in 0..1000 {
            let params = 100 + (rng.uniform() * 2e5) as usize;
            let fanout = 1 + (rng.uniform() * 6.0) as usize;
            let gain = 10f64.powf(rng.uniform_in(-8.0, -2.0));
            let bits = m.payload_bits(params);
            let p = optimal_power(bits, fanout, gain, &m).unwrap();
            let d = transmission_delay(bits, fanout, gain, p, &m).unwrap();
            assert!(
                (d - m.delay_target_s).abs() <= 1e-9 * m.delay_target_s,
                "delay {d} target {}",
                m.delay_target_s
            );
        }
    }

    #[test]
    fn hopeless_delay_targets_are_infeasible() {
        let m = ChannelModel { delay_target_s: 1e-9, ..model() };
        let r = optimal_power(1e9, 4, 1.0, &m);
        assert!(matches!(r, Err(Error::InfeasibleLink(_))));
        assert!(matches!(optimal_power(100.0, 1, 0.0, &model()), Err(Error::InfeasibleLink(_))));
    }

    #[test]
    fn gain_is_symmetric_deterministic_and_unit_mean() {
        let placement = DevicePlacement::generate(4, 50.0, 7).unwrap();
        let a = channel_gain(&placement, 0, 2, 3, 11).unwrap();
        let b = channel_gain(&placement, 2, 0, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, channel_gain(&placement, 0, 2, 4, 11).unwrap());
        assert!(channel_gain(&placement, 1, 1, 0, 11).is_err());
        assert!(channel_gain(&placement, 0, 9, 0, 11).is_err());

        // Fading has unit mean: average h * d^2 over many rounds.
        let d = placement.distance(0, 2);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|round| channel_gain(&placement, 0, 2, round, 11).unwrap() * d * d)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "fading mean {mean}");
    }

    #[test]
    fn coincident_devices_hit_the_distance_floor() {
        let placement =
            DevicePlacement::from_positions(vec![(0.0, 0.0), (0.0, 0.0), (0.3, 0.4)]).unwrap();
        assert_eq!(placement.distance(0, 1), MIN_DISTANCE_M);
        // 3-4-5 triangle scaled down still clamps to the floor.
        assert_eq!(placement.distance(0, 2), 1.0);
    }

    #[test]
    fn placement_is_inside_the_disc_and_seeded() {
        let p1 = DevicePlacement::generate(50, 30.0, 5).unwrap();
        let p2 = DevicePlacement::generate(50, 30.0, 5).unwrap();
        for i in 0..50 {
            let (x, y) = p1.position(i);
            assert!(x * x + y * y <= 30.0 * 30.0 + 1e-9);
            assert_eq!(p1.position(i), p2.position(i));
        }
        assert!(DevicePlacement::generate(0, 30.0, 5).is_err());
        assert!(DevicePlacement::generate(3, -1.0, 5).is_err());
    }

    #[test]
    fn feasibility_sums_link_powers_against_the_budget() {
        let m = model();
        let bits = m.payload_bits(10_000);
        let good = link_feasibility(&[(bits, 1e-4), (bits, 1e-4)], &m).unwrap();
        assert!(good.feasible, "{:?}", good.reason);
        assert_eq!(good.link_powers_w.len(), 2);
        assert!((good.total_power_w - good.link_powers_w.iter().sum::<f64>()).abs() < 1e-15);

        // Weak gains blow the power budget.
        let bad = link_feasibility(&[(bits, 1e-13), (bits, 1e-13)], &m).unwrap();
        assert!(!bad.feasible);
        assert!(bad.reason.is_some());

        let empty = link_feasibility(&[], &m).unwrap();
        assert!(empty.feasible);
        assert_eq!(empty.total_power_w, 0.0);
    }

    #[test]
    fn model_validation_rejects_nonsense() {
        let mut m = model();
        m.bandwidth_hz = 0.0;
        assert!(m.validate().is_err());
        let mut m = model();
        m.bits_per_parameter = 0;
        assert!(m.validate().is_err());
        assert!(transmission_delay(0.0, 1, 1.0, 1.0, &model()).is_err());
        assert!(transmission_delay(10.0, 0, 1.0, 1.0, &model()).is_err());
    }
}
