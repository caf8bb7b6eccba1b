//! Networked environment service: the simulator runs behind a TCP server,
//! the learner connects as a client and drives it through a request/reply
//! protocol. Training through [`client::RemoteEnv`] is bitwise
//! indistinguishable from training in process.
//!
//! # Wire protocol (version "1")
//!
//! Every message is one frame: a 4-byte big-endian unsigned payload length
//! followed by that many bytes of UTF-8 JSON. Payloads are capped at 16 MiB.
//! The JSON object always carries:
//!
//! * `"id"` — client-chosen correlation integer, echoed verbatim in the
//!   reply;
//! * `"type"` — one of `HELLO`, `CONFIG`, `RESET`, `STEP`, `RENDER`,
//!   `CLOSE`, their `*_REPLY` forms, or `ERROR`;
//! * `"body"` — type-specific fields, omitted when empty.
//!
//! Requests and bodies:
//!
//! | type     | request body                                   | reply body |
//! |----------|------------------------------------------------|------------|
//! | `HELLO`  | `protocol_version` (string, must be `"1"`)     | `protocol_version` |
//! | `CONFIG` | any of `seed`, `threshold`, `reward_kind`, `max_tries`, `action_space`, `chain`, `table`, `camera` | `config`: the effective episode config |
//! | `RESET`  | —                                              | `observation`: 12 numbers |
//! | `STEP`   | `action`: 6 numbers                            | `observation` (12 numbers), `reward`, `done`, `distance`, `success` |
//! | `RENDER` | —                                              | `width`, `height`, `ppm_base64` |
//! | `CLOSE`  | —                                              | — |
//!
//! `ERROR` replies carry `message` and the request's `id`. A session must
//! open with `HELLO`; `RESET`/`STEP`/`RENDER` before the first `CONFIG` are
//! answered with an `ERROR` ("session not initialized") but keep the session
//! alive, as do environment-level rejections (e.g. a non-finite action).
//! Protocol violations — wrong first message, an unparseable frame, an
//! unsupported version — are answered with a final `ERROR` and terminate the
//! session. Frames that cannot be decoded at all get `ERROR` with id 0.
//!
//! `CONFIG` with a `seed` (or a new `chain`/`table`/`camera`) builds a fresh
//! environment whose rng is the named "env" stream of that master seed —
//! exactly what local training uses, which is what makes remote and local
//! runs bitwise comparable. `CONFIG` without those fields mutates the live
//! environment (threshold, action space, reward kind, try budget) and
//! deliberately preserves its rng state, so mid-run curriculum updates do
//! not fork the random sequence.
//!
//! Numbers cross the wire as shortest round-trip decimals of IEEE-754
//! doubles and parse back to the identical bits.

pub mod client;
pub mod frame;
pub mod messages;
pub mod server;

pub use client::RemoteEnv;
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, MAX_FRAME_BYTES};
pub use messages::{ConfigBody, Payload, WireMessage, PROTOCOL_VERSION};
pub use server::{EnvService, ServiceDefaults, DEFAULT_PORT};
