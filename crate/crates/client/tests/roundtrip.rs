use patho_client::{ClientError, PathoClient};
use patho_core::api::ErrorCode;
use patho_core::descriptor::EditOp;
use patho_core::synthetic::synthetic_fundus;
use patho_service::{serve, ModelRegistry};

async fn start() -> PathoClient {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, ModelRegistry::demo(0).unwrap()));
    PathoClient::new(&format!("http://{addr}"))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_talks_to_a_live_service() {
    let client = start().await;
    let models = client.models().await.unwrap();
    assert_eq!(models.models.len(), 2);

    let f = synthetic_fundus("live", 64, 4, 21);
    let (set, _) = client.extract_image("detector-demo", "live", &f.image).await.unwrap();
    assert_eq!(set.image_size, (64, 64));
    let a = client.generate_image("generator-demo", &f.vessel, &set, 5).await.unwrap();
    let b = client.generate_image("generator-demo", &f.vessel, &set, 5).await.unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hw(), (64, 64));

    let emptied = client.manipulate_set(&set, "live", &[EditOp::RemoveAll]).await.unwrap();
    assert!(emptied.is_empty());

    let s = client.severity_image("detector-demo", &a).await.unwrap();
    assert!(s.score.is_finite());

    match client.severity_image("absent", &a).await {
        Err(ClientError::Api { status, body }) => {
            assert_eq!(status, 409);
            assert_eq!(body.error, ErrorCode::ModelNotLoaded);
        }
        other => panic!("expected a 409, got {other:?}"),
    }
}
