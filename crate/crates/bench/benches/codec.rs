use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mqttz_core::wire::{
    decode_envelope, decode_packet, encode_envelope, encode_packet, matches_str, topic_matches, Packet, PropertySet,
    Publish, TopicFilter, TopicName,
};
use rand::{RngCore, SeedableRng};

fn payload(len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rand::rngs::StdRng::seed_from_u64(len as u64).fill_bytes(&mut v);
    v
}

fn publish_codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("publish");
    for len in [64usize, 1024, 65536] {
        let packet = Packet::Publish(Publish {
            topic: "ecg/p01".into(),
            properties: PropertySet {
                response_topic: Some("$mqttz/resp/p01".into()),
                correlation_data: Some(vec![7; 8]),
            },
            payload: payload(len),
        });
        let bytes = encode_packet(&packet).unwrap();
        g.throughput(Throughput::Bytes(bytes.len() as u64));
        g.bench_with_input(BenchmarkId::new("encode", len), &packet, |b, p| {
            b.iter(|| encode_packet(black_box(p)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("decode", len), &bytes, |b, bytes| {
            b.iter(|| decode_packet(black_box(bytes)).unwrap().unwrap())
        });
    }
    g.finish();
}

fn envelope_codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("envelope");
    let origin = *b"p01\0\0\0\0\0\0\0\0\0\0\0\0\0";
    for len in [0usize, 256, 65536] {
        let ct = payload(len);
        let bytes = encode_envelope(&origin, &[1; 12], &ct, &[2; 16]);
        g.throughput(Throughput::Bytes(bytes.len() as u64));
        g.bench_with_input(BenchmarkId::new("encode", len), &ct, |b, ct| {
            b.iter(|| encode_envelope(&origin, &[1; 12], black_box(ct), &[2; 16]))
        });
        g.bench_with_input(BenchmarkId::new("decode", len), &bytes, |b, bytes| {
            b.iter(|| decode_envelope(black_box(bytes)).unwrap())
        });
    }
    g.finish();
}

fn topic_matching(c: &mut Criterion) {
    let mut g = c.benchmark_group("topic");
    let name = TopicName::parse("hospital/ward3/bed12/ecg/lead1").unwrap();
    for (label, filter) in [
        ("exact", "hospital/ward3/bed12/ecg/lead1"),
        ("plus-hash", "hospital/+/+/ecg/#"),
        ("hash", "#"),
        ("miss", "hospital/ward4/#"),
    ] {
        let f = TopicFilter::parse(filter).unwrap();
        g.bench_with_input(BenchmarkId::new("matches", label), &f, |b, f| {
            b.iter(|| topic_matches(black_box(f), &name))
        });
    }
    g.bench_function("reserved-prefix", |b| {
        b.iter(|| matches_str(black_box("+/handshake"), black_box("$mqttz/handshake")))
    });
    g.finish();
}

criterion_group!(benches, publish_codec, envelope_codec, topic_matching);
criterion_main!(benches);
