//! Deterministic discrete-event radio simulator.
//!
//! Endpoints (nodes) sit on named channels. A transmission on a channel is
//! delivered to every other endpoint on it after the channel's propagation
//! delay, unless a jam window covers the transmit time or a tap drops it.
//! Events at the same timestamp run in scheduling order, so a run is a pure
//! function of its inputs.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use crate::devices::{
    ActuatorKind, CarTransceiver, DeviceOutput, KeyFob, Millis, VehicleEvent,
};
use crate::trace::{RecordKind, TraceRecord, TraceSink};
use crate::wire::{Button, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SinkId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapId {
    channel: ChannelId,
    index: usize,
}

pub const DEFAULT_PROPAGATION_MS: Millis = 1;

/// Something done to an endpoint from outside the radio channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Button(Button),
    Vehicle(VehicleEvent),
    /// Start button inside the car.
    StartButton,
    /// Door handle pulled (passive entry).
    HandlePull,
    /// Put this frame on the air. Used by adversary radios and relays.
    Transmit(Frame),
}

/// A simulated endpoint.
pub trait Node: Any {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput;

    fn on_input(&mut self, _input: &Input, _now: Millis) -> DeviceOutput {
        DeviceOutput::default()
    }

    fn on_timer(&mut self, _now: Millis) -> DeviceOutput {
        DeviceOutput::default()
    }

    fn next_deadline(&self) -> Option<Millis> {
        None
    }

    /// Names of the main state and, if any, of a secondary state machine.
    fn states(&self) -> [Option<&'static str>; 2] {
        [None, None]
    }

    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

macro_rules! any_methods {
    () => {
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    };
}
pub(crate) use any_methods;

impl Node for KeyFob {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        self.handle_frame(frame, now)
    }

    fn on_input(&mut self, input: &Input, now: Millis) -> DeviceOutput {
        match input {
            Input::Button(b) => self.press_button(*b, now).unwrap_or_default(),
            _ => DeviceOutput::default(),
        }
    }

    fn on_timer(&mut self, now: Millis) -> DeviceOutput {
        self.tick(now)
    }

    fn next_deadline(&self) -> Option<Millis> {
        KeyFob::next_deadline(self)
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some(self.state().name()), None]
    }

    any_methods!();
}

impl Node for CarTransceiver {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        self.handle_frame(frame, now)
    }

    fn on_input(&mut self, input: &Input, now: Millis) -> DeviceOutput {
        match input {
            Input::Vehicle(e) => self.vehicle_event(*e, now),
            Input::StartButton => self.press_start(now),
            // Passive entry is not part of this design.
            _ => DeviceOutput::default(),
        }
    }

    fn on_timer(&mut self, now: Millis) -> DeviceOutput {
        self.tick(now)
    }

    fn next_deadline(&self) -> Option<Millis> {
        CarTransceiver::next_deadline(self)
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some(self.state().name()), Some(self.jam_defense().name())]
    }

    any_methods!();
}

/// A bare radio under script control. It keeps everything it hears.
#[derive(Debug, Default)]
pub struct Radio {
    inbox: Vec<(Millis, Frame)>,
}

impl Radio {
    pub fn new() -> Self {
        Radio::default()
    }

    pub fn inbox(&self) -> &[(Millis, Frame)] {
        &self.inbox
    }

    pub fn drain(&mut self) -> Vec<(Millis, Frame)> {
        std::mem::take(&mut self.inbox)
    }
}

impl Node for Radio {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        self.inbox.push((now, frame.clone()));
        DeviceOutput::default()
    }

    fn on_input(&mut self, input: &Input, _now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Input::Transmit(f) = input {
            out.frames.push(f.clone());
        }
        out
    }

    any_methods!();
}

/// One transmission as seen by a tap.
#[derive(Debug)]
pub struct Transmission<'a> {
    pub at: Millis,
    pub channel: ChannelId,
    pub sender: EndpointId,
    pub sender_name: &'a str,
    pub frame: &'a Frame,
    pub jammed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapAction {
    Pass,
    Drop,
    Delay(Millis),
}

/// Lets a tap schedule transmissions from other endpoints.
#[derive(Debug, Default)]
pub struct TapCtx {
    injections: Vec<(Millis, EndpointId, Frame)>,
}

impl TapCtx {
    pub fn inject(&mut self, at: Millis, from: EndpointId, frame: Frame) {
        self.injections.push((at, from, frame));
    }
}

/// Observer on a channel. Taps see every transmission, jammed ones
/// included, and may drop or delay it.
pub trait Tap: Any {
    fn observe(&mut self, tx: &Transmission<'_>, ctx: &mut TapCtx) -> TapAction;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Records what goes over the air.
#[derive(Debug)]
pub struct Recorder {
    pub frames: Vec<(Millis, EndpointId, Frame)>,
    pub include_jammed: bool,
    pub active: bool,
}

impl Recorder {
    pub fn new(include_jammed: bool) -> Self {
        Recorder {
            frames: Vec::new(),
            include_jammed,
            active: true,
        }
    }
}

impl Tap for Recorder {
    fn observe(&mut self, tx: &Transmission<'_>, _ctx: &mut TapCtx) -> TapAction {
        if self.active && (self.include_jammed || !tx.jammed) {
            self.frames.push((tx.at, tx.sender, tx.frame.clone()));
        }
        TapAction::Pass
    }
    any_methods!();
}

/// Forwards every frame heard on one channel out of an endpoint placed on
/// another. Frames sent by the relay's own endpoints are not forwarded back.
#[derive(Debug)]
pub struct RelayTap {
    pub out: EndpointId,
    pub ignore: Vec<EndpointId>,
    pub delay: Millis,
    pub forwarded: u64,
}

impl RelayTap {
    pub fn new(out: EndpointId, ignore: Vec<EndpointId>, delay: Millis) -> Self {
        RelayTap {
            out,
            ignore,
            delay,
            forwarded: 0,
        }
    }
}

impl Tap for RelayTap {
    fn observe(&mut self, tx: &Transmission<'_>, ctx: &mut TapCtx) -> TapAction {
        if !tx.jammed && !self.ignore.contains(&tx.sender) {
            ctx.inject(tx.at + self.delay, self.out, tx.frame.clone());
            self.forwarded += 1;
        }
        TapAction::Pass
    }
    any_methods!();
}

/// Tap driven by a closure.
pub struct FnTap<F>(pub F);

impl<F> Tap for FnTap<F>
where
    F: FnMut(&Transmission<'_>, &mut TapCtx) -> TapAction + 'static,
{
    fn observe(&mut self, tx: &Transmission<'_>, ctx: &mut TapCtx) -> TapAction {
        (self.0)(tx, ctx)
    }
    any_methods!();
}

struct RfChannel {
    name: Rc<str>,
    delay: Millis,
    /// Inclusive `[start, end]` windows in which nothing gets through.
    jam_windows: Vec<(Millis, Millis)>,
    taps: Vec<Box<dyn Tap>>,
}

impl RfChannel {
    fn jammed_at(&self, t: Millis) -> bool {
        self.jam_windows.iter().any(|&(a, b)| a <= t && t <= b)
    }
}

struct Endpoint {
    name: Rc<str>,
    channel: ChannelId,
    node: Box<dyn Node>,
    timer: Option<Millis>,
    states: [Option<&'static str>; 2],
}

enum EventKind {
    Deliver {
        to: EndpointId,
        from: EndpointId,
        channel: ChannelId,
        frame: Rc<Frame>,
    },
    Timer(EndpointId),
    Input(EndpointId, Input),
}

struct Event {
    at: Millis,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Logged actuator event with the endpoint that fired it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Actuation {
    pub at: Millis,
    pub endpoint: EndpointId,
    pub kind: ActuatorKind,
}

#[derive(Default)]
pub struct Simulator {
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Event>,
    channels: Vec<RfChannel>,
    endpoints: Vec<Endpoint>,
    sinks: Vec<Box<dyn TraceSink>>,
    actuations: Vec<Actuation>,
    transmissions: u64,
    deliveries: u64,
}

impl Simulator {
    pub fn new() -> Self {
        Simulator::default()
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn add_channel(&mut self, name: &str, delay: Millis) -> ChannelId {
        self.channels.push(RfChannel {
            name: Rc::from(name),
            delay,
            jam_windows: Vec::new(),
            taps: Vec::new(),
        });
        ChannelId(self.channels.len() - 1)
    }

    pub fn channel_name(&self, id: ChannelId) -> &str {
        &self.channels[id.0].name
    }

    pub fn add_node(&mut self, name: &str, channel: ChannelId, node: impl Node) -> EndpointId {
        let id = EndpointId(self.endpoints.len());
        let states = node.states();
        self.endpoints.push(Endpoint {
            name: Rc::from(name),
            channel,
            node: Box::new(node),
            timer: None,
            states,
        });
        for s in states.iter().flatten() {
            {
                self.emit(RecordKind::State {
                    endpoint: self.endpoints[id.0].name.clone(),
                    state: Rc::from(*s),
                });
            }
        }
        self.reschedule(id);
        id
    }

    pub fn endpoint_name(&self, id: EndpointId) -> &str {
        &self.endpoints[id.0].name
    }

    pub fn endpoint_channel(&self, id: EndpointId) -> ChannelId {
        self.endpoints[id.0].channel
    }

    pub fn find_endpoint(&self, name: &str) -> Option<EndpointId> {
        self.endpoints
            .iter()
            .position(|e| &*e.name == name)
            .map(EndpointId)
    }

    /// Moves an endpoint to another channel. Frames already in flight to it
    /// on the old channel are lost.
    pub fn attach(&mut self, id: EndpointId, channel: ChannelId) {
        self.endpoints[id.0].channel = channel;
    }

    pub fn add_tap(&mut self, channel: ChannelId, tap: impl Tap) -> TapId {
        let taps = &mut self.channels[channel.0].taps;
        taps.push(Box::new(tap));
        TapId {
            channel,
            index: taps.len() - 1,
        }
    }

    pub fn add_jam_window(&mut self, channel: ChannelId, start: Millis, end: Millis) {
        self.channels[channel.0].jam_windows.push((start, end));
    }

    pub fn jam_windows(&self, channel: ChannelId) -> &[(Millis, Millis)] {
        &self.channels[channel.0].jam_windows
    }

    pub fn add_sink(&mut self, sink: impl TraceSink) -> SinkId {
        self.sinks.push(Box::new(sink));
        SinkId(self.sinks.len() - 1)
    }

    pub fn node<T: Node>(&self, id: EndpointId) -> &T {
        self.endpoints[id.0]
            .node
            .as_any()
            .downcast_ref()
            .expect("endpoint has a different node type")
    }

    /// Mutable access to a node. Deadlines are re-read afterwards.
    pub fn with_node<T: Node, R>(&mut self, id: EndpointId, f: impl FnOnce(&mut T) -> R) -> R {
        let r = f(self.endpoints[id.0]
            .node
            .as_any_mut()
            .downcast_mut()
            .expect("endpoint has a different node type"));
        self.reschedule(id);
        r
    }

    pub fn tap<T: Tap>(&self, id: TapId) -> &T {
        self.channels[id.channel.0].taps[id.index]
            .as_any()
            .downcast_ref()
            .expect("tap has a different type")
    }

    pub fn tap_mut<T: Tap>(&mut self, id: TapId) -> &mut T {
        self.channels[id.channel.0].taps[id.index]
            .as_any_mut()
            .downcast_mut()
            .expect("tap has a different type")
    }

    pub fn sink<T: TraceSink>(&self, id: SinkId) -> &T {
        self.sinks[id.0]
            .as_any()
            .downcast_ref()
            .expect("sink has a different type")
    }

    pub fn sink_mut<T: TraceSink>(&mut self, id: SinkId) -> &mut T {
        self.sinks[id.0]
            .as_any_mut()
            .downcast_mut()
            .expect("sink has a different type")
    }

    pub fn actuations(&self) -> &[Actuation] {
        &self.actuations
    }

    pub fn transmissions(&self) -> u64 {
        self.transmissions
    }

    pub fn deliveries(&self) -> u64 {
        self.deliveries
    }

    fn push(&mut self, at: Millis, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            at,
            seq: self.seq,
            kind,
        });
    }

    /// Schedules an external input. Times in the past are clamped to now.
    pub fn schedule(&mut self, at: Millis, to: EndpointId, input: Input) {
        self.push(at.max(self.now), EventKind::Input(to, input));
    }

    /// Transmits `frame` from `from` at the current time.
    pub fn transmit_now(&mut self, from: EndpointId, frame: Frame) {
        self.schedule(self.now, from, Input::Transmit(frame));
    }

    /// Processes every event scheduled at or before `t_end`, then sets the
    /// clock to `t_end`.
    pub fn run_until(&mut self, t_end: Millis) {
        while let Some(ev) = self.queue.peek() {
            if ev.at > t_end {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.dispatch(ev.kind);
        }
        self.now = self.now.max(t_end);
    }

    pub fn run_for(&mut self, dt: Millis) {
        self.run_until(self.now + dt);
    }

    /// Runs until nothing is left to do, stopping at `limit` at the latest.
    pub fn run_idle(&mut self, limit: Millis) {
        while let Some(ev) = self.queue.peek() {
            if ev.at > limit {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.dispatch(ev.kind);
        }
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn dispatch(&mut self, kind: EventKind) {
        let now = self.now;
        let (id, out) = match kind {
            EventKind::Deliver {
                to,
                from,
                channel,
                frame,
            } => {
                if self.endpoints[to.0].channel != channel {
                    return;
                }
                self.deliveries += 1;
                if !self.sinks.is_empty() {
                    self.emit(RecordKind::Rx {
                        endpoint: self.endpoints[to.0].name.clone(),
                        from: self.endpoints[from.0].name.clone(),
                        frame: frame.clone(),
                    });
                }
                (to, self.endpoints[to.0].node.on_frame(&frame, now))
            }
            EventKind::Timer(id) => {
                let ep = &mut self.endpoints[id.0];
                if ep.timer != Some(now) {
                    return;
                }
                ep.timer = None;
                (id, ep.node.on_timer(now))
            }
            EventKind::Input(id, input) => (id, self.endpoints[id.0].node.on_input(&input, now)),
        };
        self.apply(id, out);
    }

    fn apply(&mut self, id: EndpointId, out: DeviceOutput) {
        for frame in out.frames {
            self.transmit(id, frame);
        }
        for a in out.actuators {
            self.actuations.push(Actuation {
                at: a.at,
                endpoint: id,
                kind: a.kind,
            });
            if !self.sinks.is_empty() {
                self.emit(RecordKind::Act {
                    endpoint: self.endpoints[id.0].name.clone(),
                    actuator: a.kind,
                });
            }
        }
        let states = self.endpoints[id.0].node.states();
        if states != self.endpoints[id.0].states {
            let old = std::mem::replace(&mut self.endpoints[id.0].states, states);
            for (new, old) in states.iter().zip(old.iter()) {
                if let (Some(s), true) = (new, new != old) {
                    self.emit(RecordKind::State {
                        endpoint: self.endpoints[id.0].name.clone(),
                        state: Rc::from(*s),
                    });
                }
            }
        }
        self.reschedule(id);
    }

    fn reschedule(&mut self, id: EndpointId) {
        let want = self.endpoints[id.0].node.next_deadline();
        let ep = &mut self.endpoints[id.0];
        if want != ep.timer {
            ep.timer = want.map(|d| d.max(self.now));
            if let Some(at) = ep.timer {
                self.push(at, EventKind::Timer(id));
            }
        }
    }

    fn transmit(&mut self, from: EndpointId, frame: Frame) {
        let now = self.now;
        let channel = self.endpoints[from.0].channel;
        self.transmissions += 1;
        let frame = Rc::new(frame);
        if !self.sinks.is_empty() {
            self.emit(RecordKind::Tx {
                endpoint: self.endpoints[from.0].name.clone(),
                frame: frame.clone(),
            });
        }
        let ch = &mut self.channels[channel.0];
        let jammed = ch.jammed_at(now);
        let mut ctx = TapCtx::default();
        let mut dropped = false;
        let mut extra = 0;
        if !ch.taps.is_empty() {
            let tx = Transmission {
                at: now,
                channel,
                sender: from,
                sender_name: &self.endpoints[from.0].name,
                frame: &frame,
                jammed,
            };
            for tap in ch.taps.iter_mut() {
                match tap.observe(&tx, &mut ctx) {
                    TapAction::Pass => {}
                    TapAction::Drop => dropped = true,
                    TapAction::Delay(d) => extra += d,
                }
            }
        }
        let arrive = now + ch.delay + extra;
        for (at, ep, f) in ctx.injections {
            self.schedule(at, ep, Input::Transmit(f));
        }
        if jammed || dropped {
            return;
        }
        for to in 0..self.endpoints.len() {
            if to != from.0 && self.endpoints[to].channel == channel {
                self.push(
                    arrive,
                    EventKind::Deliver {
                        to: EndpointId(to),
                        from,
                        channel,
                        frame: frame.clone(),
                    },
                );
            }
        }
    }

    fn emit(&mut self, kind: RecordKind) {
        if self.sinks.is_empty() {
            return;
        }
        let rec = TraceRecord { at: self.now, kind };
        for s in self.sinks.iter_mut() {
            s.record(&rec);
        }
    }
}
