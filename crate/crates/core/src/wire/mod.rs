//! MQTT v5 framing, topic matching and the encrypted payload envelope.

pub mod envelope;
pub mod packet;
pub mod topic;

pub use envelope::{decode_envelope, encode_envelope, EncryptedEnvelope, EnvelopeError, ENVELOPE_OVERHEAD};
pub use packet::{
    decode_packet, encode_packet, frame_length, reason, ConnAck, Connect, DecodeError, Disconnect, EncodeError, Packet,
    PropertySet, Publish, SubAck, Subscribe,
};
pub use topic::{
    filter_covers, matches_str, response_topic_for, topic_matches, TopicError, TopicFilter, TopicName, HANDSHAKE_TOPIC,
    RESERVED_PREFIX, RESPONSE_TOPIC_PREFIX,
};
