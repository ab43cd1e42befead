use std::time::Duration;

use mammo_client::{
    ClientConfig, EmbedPayload, EmbeddingClient, EmbeddingProviderConfig, ErrorKind, GenerationRequest, MockConfig,
    MockReply, MockServer, ModelClient, RetryPolicy,
};
use proptest::prelude::*;

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_backoff: Duration::from_millis(5),
        max_backoff: Duration::from_millis(20),
    }
}

fn client(url: String) -> ModelClient {
    let mut cfg = ClientConfig::new(url);
    cfg.retry = fast_retry(3);
    ModelClient::new(cfg).unwrap()
}

#[tokio::test]
async fn generate_returns_scripted_reply() {
    let server = MockServer::start(MockConfig {
        reply: MockReply::Fixed("{\"BI-RADS\": \"BI-RADS 2\"}".into()),
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let c = client(server.url());
    let req = GenerationRequest::new("mock-vlm", "describe").with_image_bytes(&[1, 2, 3]);
    let resp = c.generate(&req).await.unwrap();
    assert_eq!(resp.text, "{\"BI-RADS\": \"BI-RADS 2\"}");
    assert_eq!(resp.model, "mock-vlm");
    assert_eq!(resp.completion_tokens, Some(3));

    let sent = server.requests();
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].body, req.body());
    let text = String::from_utf8(sent[0].body.clone()).unwrap();
    assert!(text.contains("\"temperature\":0"));
    assert!(text.contains("\"stream\":false"));
}

#[tokio::test]
async fn unknown_model_is_not_retried() {
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let c = client(server.url());
    let err = c.generate(&GenerationRequest::new("nope", "p")).await.unwrap_err();
    assert_eq!(err.kind, ErrorKind::ModelNotFound);
    assert_eq!(err.attempts, 1);
    assert_eq!(server.request_count("/api/generate"), 1);
}

#[tokio::test]
async fn timeouts_retry_up_to_the_limit() {
    let server = MockServer::start(MockConfig {
        delay: Duration::from_millis(300),
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let mut cfg = ClientConfig::new(server.url());
    cfg.timeout = Duration::from_millis(50);
    cfg.retry = fast_retry(3);
    let c = ModelClient::new(cfg).unwrap();
    let err = c.generate(&GenerationRequest::new("mock-vlm", "p")).await.unwrap_err();
    assert_eq!(err.kind, ErrorKind::Timeout);
    assert_eq!(err.attempts, 3);
    assert_eq!(server.request_count("/api/generate"), 3);
}

#[tokio::test]
async fn wrong_port_is_connect_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let c = client(format!("http://127.0.0.1:{port}"));
    let err = c.health_check().await.unwrap_err();
    assert_eq!(err.kind, ErrorKind::Connect);
    assert_eq!(err.attempts, 3);
}

#[tokio::test]
async fn health_check_lists_models() {
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let info = client(server.url()).health_check().await.unwrap();
    assert_eq!(info.models, vec!["mock-vlm".to_string()]);
    assert_eq!(info.version, "0.0.0-mock");

    let empty = MockServer::start(MockConfig {
        models: vec![],
        ..MockConfig::default()
    })
    .await
    .unwrap();
    assert!(client(empty.url()).health_check().await.unwrap().models.is_empty());
}

async fn embed_with(raw: &str, dim: usize) -> Result<Vec<f64>, ErrorKind> {
    let server = MockServer::start(MockConfig {
        embed_override: Some(raw.to_string()),
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let c = EmbeddingClient::new(EmbeddingProviderConfig::new(server.url(), "fixed", dim)).unwrap();
    c.embed(EmbedPayload::Text("x")).await.map(|e| e.vector).map_err(|e| e.kind)
}

#[tokio::test]
async fn embed_contract() {
    let four = r#"{"vector":[0.5,1.0,-2.0,3.0],"dim":4,"provider_id":"fixed"}"#;
    assert_eq!(embed_with(four, 4).await.unwrap(), vec![0.5, 1.0, -2.0, 3.0]);
    let three = r#"{"vector":[0.5,1.0,-2.0],"dim":3,"provider_id":"fixed"}"#;
    assert_eq!(embed_with(three, 4).await.unwrap_err(), ErrorKind::DimensionMismatch { actual: 3, expected: 4 });
    let nan = r#"{"vector":[0.5,NaN,-2.0,1.0],"dim":4,"provider_id":"fixed"}"#;
    assert_eq!(embed_with(nan, 4).await.unwrap_err(), ErrorKind::MalformedBody);
    let null = r#"{"vector":[0.5,null,-2.0,1.0],"dim":4,"provider_id":"fixed"}"#;
    assert_eq!(embed_with(null, 4).await.unwrap_err(), ErrorKind::MalformedBody);
}

#[tokio::test]
async fn mock_image_and_text_embeddings() {
    let server = MockServer::start(MockConfig::default()).await.unwrap();
    let c = EmbeddingClient::new(EmbeddingProviderConfig::new(server.url(), "mock-pool8", 64)).unwrap();
    let img = image::GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 8) ^ (y * 4)) as u8]));
    let mut png = Vec::new();
    image::DynamicImage::ImageLuma8(img)
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .unwrap();
    let a = c.embed(EmbedPayload::Image(&png)).await.unwrap();
    let b = c.embed(EmbedPayload::Image(&png)).await.unwrap();
    assert_eq!(a, b);
    assert_eq!(a.vector.len(), 64);
    assert_eq!(a.provider_id, "mock-pool8");
    let t = c.embed(EmbedPayload::Text("mass in left CC view")).await.unwrap();
    assert_eq!(t.vector.len(), 64);
}

proptest! {
    #[test]
    fn request_bodies_are_byte_stable(model in "[a-z0-9:.-]{1,20}", prompt in "\\PC{0,80}", seed in proptest::option::of(any::<u64>())) {
        let a = GenerationRequest::new(model.clone(), prompt.clone()).with_seed(seed).with_image_bytes(b"img");
        let b = GenerationRequest::new(model, prompt).with_seed(seed).with_image_bytes(b"img");
        prop_assert_eq!(a.body(), b.body());
        let back: GenerationRequest = serde_json::from_slice(&a.body()).unwrap();
        prop_assert_eq!(back.body(), a.body());
    }
}
