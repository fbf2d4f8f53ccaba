//! Builds a simulated car, its credential and the two radio neighbourhoods
//! ("near car", "near owner") for any of the four techniques.

use serde::{Deserialize, Serialize};

use crate::audit::{AuditConfig, Auditor};
use crate::authcrypt::ProtocolParams;
use crate::baselines::{
    Cid, FixedCodeCar, FixedCodeFob, PassiveCrCar, RollingCodeCar, RollingCodeFob, Technique,
    DEFAULT_CHALLENGE_BITS, DEFAULT_ROLLING_WINDOW,
};
use crate::channel::{
    ChannelId, EndpointId, Input, SinkId, Simulator, DEFAULT_PROPAGATION_MS,
};
use crate::devices::{CarTransceiver, KeyFob, Millis, Timing};
use crate::keystore::{CarKeyId, EntropyKind, EntropySource, KeyTable, StrongSource};
use crate::trace::TextTrace;
use crate::wire::Button;

/// Mixes a run seed with a purpose tag so every component gets its own
/// independent stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod tags {
    pub const TABLE: u64 = 1;
    pub const CAR: u64 = 2;
    pub const FOB: u64 = 3;
    pub const ADVERSARY: u64 = 4;
    pub const KEY: u64 = 5;
    pub const ID: u64 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub technique: Technique,
    pub params: ProtocolParams,
    pub timing: Timing,
    pub lockout: bool,
    pub jam_defense: bool,
    /// Entropy family of the car's challenge generator.
    pub entropy: EntropyKind,
    pub fixed_bits: u32,
    pub rolling_bits: u32,
    pub rolling_window: u32,
    pub cr_bits: u32,
    /// Car starts with the engine running and the doors unlocked.
    pub driver_on_board: bool,
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            technique: Technique::Proposed,
            params: ProtocolParams::FULL,
            timing: Timing::default(),
            lockout: true,
            jam_defense: true,
            entropy: EntropyKind::Strong,
            fixed_bits: 32,
            rolling_bits: 32,
            rolling_window: DEFAULT_ROLLING_WINDOW,
            cr_bits: DEFAULT_CHALLENGE_BITS,
            driver_on_board: false,
            seed: 0,
        }
    }
}

impl TestbedConfig {
    pub fn audit_config(&self) -> AuditConfig {
        AuditConfig::new(&self.timing, self.lockout)
    }

    pub fn car_id(&self) -> CarKeyId {
        CarKeyId::new(derive_seed(self.seed, tags::ID) as u32)
    }

    pub fn table(&self) -> KeyTable {
        KeyTable::generate(&mut StrongSource::from_seed(derive_seed(self.seed, tags::TABLE)))
    }

    fn shared_key(&self) -> u64 {
        derive_seed(self.seed, tags::KEY)
    }

    fn car_entropy(&self) -> Box<dyn EntropySource> {
        self.entropy.source(derive_seed(self.seed, tags::CAR))
    }

    /// Adversary's own randomness; unrelated to any device secret.
    pub fn adversary_entropy(&self) -> StrongSource {
        StrongSource::from_seed(derive_seed(self.seed, tags::ADVERSARY))
    }
}

pub const CAR: &str = "car";
pub const FOB: &str = "fob";

pub struct Testbed {
    pub sim: Simulator,
    pub config: TestbedConfig,
    pub near_car: ChannelId,
    pub near_owner: ChannelId,
    pub car: EndpointId,
    /// The owner's credential: key fob, or CID for passive challenge-response.
    pub fob: EndpointId,
    pub auditor: SinkId,
    pub text: Option<SinkId>,
}

impl Testbed {
    /// `owner_near_car` puts the credential in radio range of the car.
    pub fn new(config: TestbedConfig, owner_near_car: bool, text_trace: bool) -> Self {
        let mut sim = Simulator::new();
        let audit = config.audit_config();
        let text = text_trace.then(|| sim.add_sink(TextTrace::with_header(&audit.header())));
        let header_lines = text.map_or(0, |id| sim.sink::<TextTrace>(id).lines());
        let auditor = sim.add_sink(Auditor::new(audit).with_line_offset(header_lines));
        let near_car = sim.add_channel("near_car", DEFAULT_PROPAGATION_MS);
        let near_owner = sim.add_channel("near_owner", DEFAULT_PROPAGATION_MS);
        let fob_channel = if owner_near_car { near_car } else { near_owner };
        let key = config.shared_key();

        let (car, fob) = match config.technique {
            Technique::Proposed => {
                let id = config.car_id();
                let table = config.table();
                let mut car = CarTransceiver::new(id, table.clone(), config.car_entropy())
                    .with_params(config.params)
                    .with_timing(config.timing)
                    .with_lockout(config.lockout)
                    .with_jam_defense(config.jam_defense);
                if config.driver_on_board {
                    car = car.with_driver_on_board();
                }
                let fob = KeyFob::new(
                    id,
                    table,
                    Box::new(StrongSource::from_seed(derive_seed(config.seed, tags::FOB))),
                )
                .with_params(config.params)
                .with_timing(config.timing);
                (
                    sim.add_node(CAR, near_car, car),
                    sim.add_node(FOB, fob_channel, fob),
                )
            }
            Technique::Fixed => {
                let code = key as u32;
                (
                    sim.add_node(CAR, near_car, FixedCodeCar::new(code, config.fixed_bits)),
                    sim.add_node(FOB, fob_channel, FixedCodeFob::new(code)),
                )
            }
            Technique::Rolling => (
                sim.add_node(
                    CAR,
                    near_car,
                    RollingCodeCar::new(key, config.rolling_bits, config.rolling_window),
                ),
                sim.add_node(FOB, fob_channel, RollingCodeFob::new(key, config.rolling_bits)),
            ),
            Technique::PassiveCr => (
                sim.add_node(
                    CAR,
                    near_car,
                    PassiveCrCar::new(key, config.cr_bits, config.car_entropy())
                        .with_response_ms(config.timing.response_ms),
                ),
                sim.add_node(FOB, fob_channel, Cid::new(key, config.cr_bits)),
            ),
        };
        Testbed {
            sim,
            config,
            near_car,
            near_owner,
            car,
            fob,
            auditor,
            text,
        }
    }

    pub fn auditor(&self) -> &Auditor {
        self.sim.sink(self.auditor)
    }

    pub fn trace_text(&self) -> Option<&str> {
        self.text.map(|id| self.sim.sink::<TextTrace>(id).text())
    }

    pub fn into_trace_text(mut self) -> Option<String> {
        self.text
            .map(|id| std::mem::take(self.sim.sink_mut::<TextTrace>(id)).into_text())
    }

    pub fn adversarial_successes(&self) -> usize {
        self.auditor().adversarial().count()
    }

    /// One legitimate use by the owner: a button press, or a handle pull
    /// with the CID in range. Runs until the exchange settles.
    pub fn owner_session(&mut self, button: Button) {
        let now = self.sim.now();
        match self.config.technique {
            Technique::PassiveCr => self.sim.schedule(now, self.car, Input::HandlePull),
            _ => self.sim.schedule(now, self.fob, Input::Button(button)),
        }
        self.settle();
    }

    /// Lets in-flight exchanges finish and every timeout expire.
    pub fn settle(&mut self) {
        let t = self.config.timing;
        let horizon = t.challenge_ms.max(t.response_ms).max(t.auth_ok_ms).max(t.command_ms).max(t.start_ms) + 10;
        self.sim.run_for(horizon);
    }

    pub fn move_owner(&mut self, near_car: bool) {
        let ch = if near_car { self.near_car } else { self.near_owner };
        self.sim.attach(self.fob, ch);
    }

    pub fn elapsed(&self) -> Millis {
        self.sim.now()
    }
}
