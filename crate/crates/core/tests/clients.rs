use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use colostream::broker::{Broker, BrokerConfig};
use colostream::clients::{
    drain_until, run_producer, ClientError, Poll, ProducerConfig, PullSource, PullSourceConfig,
    PushGroup, PushGroupConfig, PushMember, Source, SourceRecord, ValueSource,
};
use colostream::stream::{ChunkBuilder, RecordIter, APPEND_AT_HEAD};
use colostream::wire::{AppendAck, AppendRequest, Delivery, Endpoint, MsgType, Network};

fn start(name: &str, partitions: u32) -> (Network, Broker) {
    let net = Network::new();
    let cfg = BrokerConfig::new(Endpoint::Loopback(name.into())).with_stream("s", partitions);
    let b = Broker::start(cfg, &net).unwrap();
    (net, b)
}

/// Values "<producer>-<seq>" padded to a fixed size, so every record is unique.
struct Numbered {
    producer: u32,
    seq: u64,
    size: usize,
    buf: Vec<u8>,
    delay: Option<Duration>,
}

impl Numbered {
    fn new(producer: u32, size: usize) -> Self {
        Self {
            producer,
            seq: 0,
            size,
            buf: Vec::new(),
            delay: None,
        }
    }
}

impl ValueSource for Numbered {
    fn next_value(&mut self) -> &[u8] {
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        self.buf = format!("{}-{:012}", self.producer, self.seq).into_bytes();
        self.buf.resize(self.size, b'.');
        self.seq += 1;
        &self.buf
    }
}

fn preappend(net: &Network, b: &Broker, pid: u32, chunks: u64, per_chunk: u32) {
    let mut c = net.client(b.endpoint()).unwrap();
    for i in 0..chunks {
        let mut builder = ChunkBuilder::new(pid, 1 << 16);
        for j in 0..per_chunk {
            let v = format!("p{pid}-{}", i * u64::from(per_chunk) + u64::from(j));
            builder.try_push(b"", v.as_bytes()).unwrap();
        }
        let _: AppendAck = c
            .request(&AppendRequest {
                stream: "s".into(),
                chunks: vec![builder.seal(APPEND_AT_HEAD)],
            })
            .unwrap();
    }
}

fn stored_values(b: &Broker, pid: u32) -> Vec<Vec<u8>> {
    b.read("s", pid, 0, usize::MAX)
        .unwrap()
        .iter()
        .flat_map(|c| RecordIter::new(c.payload()).map(|r| r.unwrap().value.to_vec()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn slow_producer_relies_on_seal_timeout() {
    let (net, b) = start("c-timeout", 1);
    let mut cfg = ProducerConfig::new(0, "s", vec![0]);
    cfg.chunk_size = 1 << 20;
    cfg.record_size = 32;
    let mut values = Numbered::new(0, 32);
    values.delay = Some(Duration::from_millis(3));
    let t0 = Instant::now();
    let r = run_producer(&net, b.endpoint(), &cfg, &mut values, t0, t0 + Duration::from_millis(150)).unwrap();
    assert!(r.error.is_none());
    let chunks = b.read("s", 0, 0, usize::MAX).unwrap();
    // Nowhere near a full 1 MiB chunk: everything was sealed by the timeout.
    assert!(chunks.len() >= 10, "{} chunks", chunks.len());
    assert!(chunks.iter().all(|c| c.record_count() <= 2));
    assert_eq!(r.client.records(), b.heads("s").unwrap()[0]);
}

#[test]
fn producer_fills_partitions_round_robin() {
    let (net, b) = start("c-rr", 4);
    let mut cfg = ProducerConfig::new(0, "s", vec![0, 1, 2, 3]);
    cfg.chunk_size = 1024;
    cfg.record_size = 100;
    cfg.max_records = Some(9 * 4 * 25);
    let mut values = Numbered::new(0, 100);
    let t0 = Instant::now();
    let r = run_producer(&net, b.endpoint(), &cfg, &mut values, t0, t0 + Duration::from_secs(10)).unwrap();
    assert_eq!(r.client.records(), 900);
    // 9 records per full chunk, one chunk per partition per request.
    assert_eq!(b.heads("s").unwrap(), vec![225; 4]);
    assert_eq!(r.client.rpcs(), 25);
    assert_eq!(b.metrics().rpcs(MsgType::Append), 25);
}

#[test]
fn explicit_offsets_resync_after_interference() {
    let (net, b) = start("c-resync", 1);
    preappend(&net, &b, 0, 1, 3);
    let mut cfg = ProducerConfig::new(0, "s", vec![0]);
    cfg.chunk_size = 256;
    cfg.record_size = 20;
    cfg.explicit_offsets = true;
    cfg.max_records = Some(100);
    let mut values = Numbered::new(0, 20);
    let t0 = Instant::now();
    let r = run_producer(&net, b.endpoint(), &cfg, &mut values, t0, t0 + Duration::from_secs(10)).unwrap();
    assert!(r.error.is_none(), "{:?}", r.error);
    assert_eq!(r.resyncs, 1);
    assert_eq!(b.heads("s").unwrap(), vec![103]);
    b.check_invariants().unwrap();
}

#[test]
fn idle_pull_source_polls_at_timer_rate() {
    let (net, b) = start("c-idle-pull", 1);
    let t0 = Instant::now();
    let mut cfg = PullSourceConfig::new(0, "s", vec![(0, 0)]);
    cfg.poll_timeout = Duration::from_millis(10);
    let mut src = PullSource::connect(&net, b.endpoint(), cfg, t0).unwrap();
    let r = drain_until(&mut src, t0 + Duration::from_secs(1), &mut |_| panic!("no data")).unwrap();
    // 1 s / 10 ms = 100 cycles, minus RPC time and sleep overshoot.
    let expected = 1000 / 10;
    assert!((expected * 8 / 10..=expected * 11 / 10).contains(&r.rpcs()), "{}", r.rpcs());
    assert_eq!(r.records(), 0);
    assert_eq!(b.metrics().rpcs(MsgType::Pull), r.rpcs());
}

#[test]
fn one_pull_cycle_emits_everything_in_order() {
    let (net, b) = start("c-pull", 1);
    preappend(&net, &b, 0, 10, 5);
    let mut src = PullSource::connect(&net, b.endpoint(), PullSourceConfig::new(0, "s", vec![(0, 0)]), Instant::now()).unwrap();
    let mut offsets = Vec::new();
    let p = src
        .poll_next(Duration::from_millis(10), &mut |r| offsets.push(r.offset))
        .unwrap();
    assert_eq!(p, Poll::Records(50));
    assert_eq!(offsets, (0..50).collect::<Vec<u64>>());
    assert_eq!(src.offsets(), vec![(0, 50)]);
}

#[test]
fn pull_from_interior_offset_skips_seen_records() {
    let (net, b) = start("c-interior", 1);
    preappend(&net, &b, 0, 2, 5);
    let mut src = PullSource::connect(&net, b.endpoint(), PullSourceConfig::new(0, "s", vec![(0, 3)]), Instant::now()).unwrap();
    let mut offsets = Vec::new();
    src.poll_next(Duration::ZERO, &mut |r| offsets.push(r.offset)).unwrap();
    assert_eq!(offsets, (3..10).collect::<Vec<u64>>());
}

type Seen = BTreeMap<u32, Vec<(u64, Vec<u8>)>>;

fn collect(seen: &mut Seen) -> impl FnMut(SourceRecord<'_>) + '_ {
    move |r| seen.entry(r.partition).or_default().push((r.offset, r.value.to_vec()))
}

/// Produces into 2 partitions while `source` consumes, then drains.
fn produce_and_consume(net: &Network, b: &Broker, sources: Vec<Box<dyn Source>>, secs: u64) -> Seen {
    let t0 = Instant::now();
    let until = t0 + Duration::from_secs(secs);
    let producer = {
        let net = net.clone();
        let ep = b.endpoint().clone();
        std::thread::spawn(move || {
            let mut cfg = ProducerConfig::new(0, "s", vec![0, 1]);
            cfg.chunk_size = 4096;
            cfg.record_size = 64;
            cfg.max_records = Some(200_000);
            run_producer(&net, &ep, &cfg, &mut Numbered::new(0, 64), t0, until).unwrap()
        })
    };
    let done = Arc::new(AtomicBool::new(false));
    let consumers: Vec<_> = sources
        .into_iter()
        .map(|mut s| {
            let done = Arc::clone(&done);
            std::thread::spawn(move || {
                let mut seen = Seen::new();
                let mut emit = collect(&mut seen);
                let mut idle_after_done = 0;
                loop {
                    let p = s.poll_next(Duration::from_millis(20), &mut emit).unwrap();
                    if done.load(Ordering::Acquire) {
                        match p {
                            Poll::Records(_) => idle_after_done = 0,
                            _ => idle_after_done += 1,
                        }
                        if idle_after_done >= 10 {
                            break;
                        }
                    }
                }
                drop(emit);
                seen
            })
        })
        .collect();
    let report = producer.join().unwrap();
    assert!(report.error.is_none());
    done.store(true, Ordering::Release);
    let mut all = Seen::new();
    for c in consumers {
        for (p, v) in c.join().unwrap() {
            all.entry(p).or_default().extend(v);
        }
    }
    all
}

fn assert_exactly_once(b: &Broker, seen: &Seen) {
    for pid in 0..2u32 {
        let got = seen.get(&pid).cloned().unwrap_or_default();
        let offsets: Vec<u64> = got.iter().map(|g| g.0).collect();
        assert_eq!(offsets, (0..offsets.len() as u64).collect::<Vec<_>>());
        let values: Vec<Vec<u8>> = got.into_iter().map(|g| g.1).collect();
        assert_eq!(values, stored_values(b, pid), "partition {pid}");
    }
}

#[test]
fn pull_sources_see_every_record_once() {
    let (net, b) = start("c-pull-eo", 2);
    let t0 = Instant::now();
    let sources: Vec<Box<dyn Source>> = (0..2u32)
        .map(|i| {
            let cfg = PullSourceConfig::new(i, "s", vec![(i, 0)]);
            Box::new(PullSource::connect(&net, b.endpoint(), cfg, t0).unwrap()) as Box<dyn Source>
        })
        .collect();
    let seen = produce_and_consume(&net, &b, sources, 2);
    assert_exactly_once(&b, &seen);
}

fn push_sources(net: &Network, b: &Broker, delivery: Delivery) -> Vec<Box<dyn Source>> {
    let members = (0..2u32)
        .map(|i| PushMember {
            task_id: i,
            partitions: vec![(i, 0)],
        })
        .collect();
    let mut cfg = PushGroupConfig::new("g", "s", members, 4096);
    cfg.delivery = delivery;
    let g = PushGroup::subscribe(net, b.endpoint(), &cfg, Some(b.store()), Instant::now()).unwrap();
    assert_eq!(g.subscribe_rpcs, 1);
    g.into_sources().into_iter().map(|s| Box::new(s) as Box<dyn Source>).collect()
}

#[test]
fn shared_push_sources_see_every_record_once() {
    let (net, b) = start("c-push-eo", 2);
    let sources = push_sources(&net, &b, Delivery::Shared);
    let seen = produce_and_consume(&net, &b, sources, 2);
    assert_exactly_once(&b, &seen);
    assert_eq!(b.metrics().rpcs(MsgType::SubscribePush), 1);
    assert_eq!(b.metrics().rpcs(MsgType::Pull), 0);
}

#[test]
fn remote_push_sources_see_every_record_once() {
    let (net, b) = start("c-remote-eo", 2);
    let sources = push_sources(&net, &b, Delivery::Remote);
    let seen = produce_and_consume(&net, &b, sources, 2);
    assert_exactly_once(&b, &seen);
}

#[test]
fn single_task_group_consumes_preappended_chunks() {
    let (net, b) = start("c-push-one", 1);
    preappend(&net, &b, 0, 3, 4);
    let cfg = PushGroupConfig::new(
        "g",
        "s",
        vec![PushMember {
            task_id: 5,
            partitions: vec![(0, 0)],
        }],
        4096,
    );
    let mut src = PushGroup::subscribe(&net, b.endpoint(), &cfg, Some(b.store()), Instant::now())
        .unwrap()
        .into_sources()
        .pop()
        .unwrap();
    let mut offsets = Vec::new();
    let mut objects = 0;
    while offsets.len() < 12 {
        if let Poll::Records(_) = src.poll_next(Duration::from_secs(1), &mut |r| offsets.push(r.offset)).unwrap() {
            objects += 1;
        }
    }
    assert_eq!(objects, 3);
    assert_eq!(offsets, (0..12).collect::<Vec<u64>>());
}

#[test]
fn four_task_group_uses_one_subscription_and_one_push_worker() {
    let (net, b) = start("c-push-four", 4);
    let members = (0..4u32)
        .map(|i| PushMember {
            task_id: 10 + i,
            partitions: vec![(i, 0)],
        })
        .collect();
    let cfg = PushGroupConfig::new("g", "s", members, 4096);
    assert_eq!(cfg.leader(), Some(10));
    let g = PushGroup::subscribe(&net, b.endpoint(), &cfg, Some(b.store()), Instant::now()).unwrap();
    assert_eq!(g.subscribe_rpcs, 1);
    assert_eq!(g.leader, 10);
    assert_eq!(b.metrics().rpcs(MsgType::SubscribePush), 1);
    assert_eq!(b.metrics().push_worker_count(), 1);
    let sources = g.into_sources();
    assert_eq!(sources.len(), 4);
    drop(sources);
    let t = Instant::now();
    while b.metrics().push_worker_count() != 0 && t.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(b.metrics().push_worker_count(), 0);
}

#[test]
fn slow_consumer_is_bounded_by_pool_depth() {
    let (net, b) = start("c-backpressure", 1);
    let cfg = PushGroupConfig::new(
        "g",
        "s",
        vec![PushMember {
            task_id: 0,
            partitions: vec![(0, 0)],
        }],
        4096,
    );
    let depth = cfg.objects_per_consumer as usize;
    let mut src = PushGroup::subscribe(&net, b.endpoint(), &cfg, Some(b.store()), Instant::now())
        .unwrap()
        .into_sources()
        .pop()
        .unwrap();
    let pool = b.store().attach("s", "g").unwrap();
    let t0 = Instant::now();
    let until = t0 + Duration::from_millis(800);
    let producer = {
        let net = net.clone();
        let ep = b.endpoint().clone();
        std::thread::spawn(move || {
            let mut cfg = ProducerConfig::new(1, "s", vec![0]);
            cfg.chunk_size = 2048;
            cfg.record_size = 64;
            run_producer(&net, &ep, &cfg, &mut Numbered::new(1, 64), t0, until).unwrap()
        })
    };
    let mut max_filled = 0;
    while Instant::now() < until {
        max_filled = max_filled.max(pool.counts(0).filled);
        src.poll_next(Duration::from_millis(5), &mut |_| std::thread::sleep(Duration::from_micros(200)))
            .unwrap();
    }
    let report = producer.join().unwrap();
    assert!(max_filled <= depth, "{max_filled} > {depth}");
    // The producer kept appending far beyond what the slow consumer took.
    assert!(report.client.records() > src.report().records() * 2);
}

#[test]
fn subscription_conflict_is_fatal() {
    let (net, b) = start("c-conflict", 1);
    let cfg = PushGroupConfig::new(
        "g",
        "s",
        vec![PushMember {
            task_id: 0,
            partitions: vec![(0, 0)],
        }],
        4096,
    );
    let _first = PushGroup::subscribe(&net, b.endpoint(), &cfg, Some(b.store()), Instant::now()).unwrap();
    match PushGroup::subscribe(&net, b.endpoint(), &cfg, Some(b.store()), Instant::now()) {
        Err(ClientError::Rpc(e)) => assert_eq!(e.code(), Some(colostream::wire::ErrorCode::SubscriptionConflict)),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("second subscription accepted"),
    }
}
