//! HTTP client for Ollama-compatible model servers and embedding providers,
//! plus a deterministic mock of both.

pub mod client;
pub mod mock;

pub use client::{
    ClientConfig, ClientError, EmbedPayload, Embedding, EmbeddingClient, EmbeddingProviderConfig, ErrorKind,
    GenerationOptions, GenerationRequest, GenerationResponse, ModelClient, RetryPolicy, ServerInfo,
};
pub use mock::{MockConfig, MockReply, MockServer};
