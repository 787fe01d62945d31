//! Ordered, resumable event channels with bounded subscriber queues.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::VecDeque;
use std::sync::Mutex;
use tokio::sync::mpsc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    LiveFrames,
    ShiftCurve,
    ScanEvents,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::LiveFrames, Channel::ShiftCurve, Channel::ScanEvents];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::LiveFrames => "live_frames",
            Channel::ShiftCurve => "shift_curve",
            Channel::ScanEvents => "scan_events",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown channel {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Starts at 1 and increases by one per event on the channel.
    pub seq: u64,
    pub channel: Channel,
    pub kind: String,
    pub data: Value,
}

#[derive(Debug, Default)]
struct ChannelState {
    next_seq: u64,
    recent: VecDeque<Event>,
    subscribers: Vec<mpsc::Sender<Event>>,
    disconnected: u64,
}

#[derive(Debug)]
pub struct EventBus {
    channels: [Mutex<ChannelState>; 3],
    buffer: usize,
    retain: usize,
}

#[derive(Debug)]
pub struct Subscription {
    pub channel: Channel,
    pub rx: mpsc::Receiver<Event>,
    /// Set when events after `last_seen` had already been dropped from the
    /// retention window, so the replay is incomplete.
    pub gap: bool,
}

impl Subscription {
    pub async fn recv(&mut self) -> Option<Event> {
        self.rx.recv().await
    }

    /// Everything queued right now, without waiting.
    pub fn drain(&mut self) -> Vec<Event> {
        let mut out = Vec::new();
        while let Ok(e) = self.rx.try_recv() {
            out.push(e);
        }
        out
    }

    /// True once the bus has dropped this subscriber and its queue is empty.
    pub fn is_closed(&self) -> bool {
        self.rx.is_closed() && self.rx.is_empty()
    }
}

impl EventBus {
    pub fn new(buffer: usize, retain: usize) -> Self {
        EventBus {
            channels: Default::default(),
            buffer: buffer.max(1),
            retain: retain.max(1),
        }
    }

    /// Appends an event and fans it out. Subscribers whose queue is full
    /// are disconnected.
    pub fn publish(&self, channel: Channel, kind: &str, data: Value) -> u64 {
        let mut st = self.channels[channel.index()].lock().expect("event channel");
        st.next_seq += 1;
        let event = Event {
            seq: st.next_seq,
            channel,
            kind: kind.into(),
            data,
        };
        let before = st.subscribers.len();
        st.subscribers.retain(|tx| tx.try_send(event.clone()).is_ok());
        st.disconnected += (before - st.subscribers.len()) as u64;
        st.recent.push_back(event);
        while st.recent.len() > self.retain {
            st.recent.pop_front();
        }
        st.next_seq
    }

    /// Subscribes to `channel`. With `last_seen`, retained events after it
    /// are queued first.
    pub fn subscribe(&self, channel: Channel, last_seen: Option<u64>) -> Subscription {
        let mut st = self.channels[channel.index()].lock().expect("event channel");
        let replay: Vec<Event> = match last_seen {
            Some(n) => st.recent.iter().filter(|e| e.seq > n).cloned().collect(),
            None => Vec::new(),
        };
        let gap = match (last_seen, st.recent.front()) {
            (Some(n), Some(first)) => first.seq > n + 1,
            (Some(n), None) => st.next_seq > n,
            _ => false,
        };
        let (tx, rx) = mpsc::channel(self.buffer + replay.len());
        for e in replay {
            tx.try_send(e).expect("capacity covers replay");
        }
        st.subscribers.push(tx);
        Subscription { channel, rx, gap }
    }

    pub fn last_seq(&self, channel: Channel) -> u64 {
        self.channels[channel.index()].lock().expect("event channel").next_seq
    }

    /// Subscribers dropped for overflowing their queue.
    pub fn disconnected(&self, channel: Channel) -> u64 {
        self.channels[channel.index()].lock().expect("event channel").disconnected
    }

    pub fn subscriber_count(&self, channel: Channel) -> usize {
        let mut st = self.channels[channel.index()].lock().expect("event channel");
        st.subscribers.retain(|tx| !tx.is_closed());
        st.subscribers.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ordered_and_resumable() {
        let bus = EventBus::new(64, 100);
        for i in 0..20 {
            bus.publish(Channel::ShiftCurve, "point", json!(i));
        }
        let mut sub = bus.subscribe(Channel::ShiftCurve, Some(10));
        assert!(!sub.gap);
        let seqs: Vec<u64> = sub.drain().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (11..=20).collect::<Vec<_>>());
        bus.publish(Channel::ShiftCurve, "point", json!(20));
        assert_eq!(sub.drain()[0].seq, 21);
    }

    #[test]
    fn channels_are_independent() {
        let bus = EventBus::new(8, 8);
        bus.publish(Channel::ScanEvents, "a", json!(null));
        assert_eq!(bus.publish(Channel::LiveFrames, "b", json!(null)), 1);
        assert_eq!(bus.last_seq(Channel::ScanEvents), 1);
    }

    #[test]
    fn slow_consumer_disconnected() {
        let bus = EventBus::new(4, 100);
        let mut slow = bus.subscribe(Channel::LiveFrames, None);
        let mut fast = bus.subscribe(Channel::LiveFrames, None);
        for i in 0..10 {
            bus.publish(Channel::LiveFrames, "frame", json!(i));
            fast.drain();
        }
        assert_eq!(bus.disconnected(Channel::LiveFrames), 1);
        assert_eq!(slow.drain().len(), 4);
        assert!(slow.is_closed());
        assert!(!fast.is_closed());
    }

    #[test]
    fn resume_past_retention_reports_gap() {
        let bus = EventBus::new(4, 5);
        for i in 0..12 {
            bus.publish(Channel::ScanEvents, "e", json!(i));
        }
        let mut sub = bus.subscribe(Channel::ScanEvents, Some(3));
        assert!(sub.gap);
        assert_eq!(sub.drain().first().map(|e| e.seq), Some(8));
        assert!(!bus.subscribe(Channel::ScanEvents, Some(7)).gap);
    }
}
