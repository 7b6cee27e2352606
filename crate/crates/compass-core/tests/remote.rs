//! Wire-level checks of the remote chat backend and the remote tool
//! adapter against a minimal in-process HTTP responder.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use compass_core::gateway::{BackendSpec, ChatMessage, ChatRequest, Component, Gateway};
use compass_core::tools::{
    ParamSpec, ParamType, RemoteTool, Tool, ToolCallRecord, ToolRegistry, ToolSpec,
};

/// Answers `count` HTTP requests with the given JSON body, then stops.
/// Returns the bound address and the captured request bodies.
fn serve_json(body: &'static str, count: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind localhost");
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut captured = Vec::new();
        for _ in 0..count {
            let (mut stream, _) = listener.accept().expect("accept");
            let mut buf = vec![0u8; 65536];
            let mut read = 0;
            // read until the headers and the content-length body are in
            let request = loop {
                let n = stream.read(&mut buf[read..]).expect("read");
                read += n;
                let text = String::from_utf8_lossy(&buf[..read]).to_string();
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|l| {
                            l.to_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    if text.len() >= header_end + 4 + content_length {
                        break text;
                    }
                }
                if n == 0 {
                    break text;
                }
            };
            captured.push(request);
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(reply.as_bytes()).expect("write");
        }
        captured
    });
    (addr, handle)
}

#[test]
fn remote_backend_round_trip() {
    let (addr, server) = serve_json(
        r#"{"choices":[{"message":{"role":"assistant","content":"<answer>42</answer>"}}],"usage":{"prompt_tokens":11,"completion_tokens":7,"total_tokens":18}}"#,
        1,
    );
    let gateway = Gateway::from_spec(&BackendSpec::remote(addr)).unwrap();
    let request = ChatRequest::new(vec![
        ChatMessage::system("sys"),
        ChatMessage::user("what is six times seven?"),
    ]);
    let response = gateway.complete(Component::Main, &request).unwrap();
    assert_eq!(response.text, "<answer>42</answer>");
    assert_eq!(
        response.prompt_tokens, 11,
        "wire usage overrides the heuristic"
    );
    assert_eq!(response.completion_tokens, 7);

    let requests = server.join().unwrap();
    let body_start = requests[0].find("\r\n\r\n").unwrap() + 4;
    let sent: serde_json::Value = serde_json::from_str(&requests[0][body_start..]).unwrap();
    assert_eq!(sent["messages"][0]["role"], "system");
    assert_eq!(sent["messages"][1]["content"], "what is six times seven?");
    assert_eq!(sent["temperature"], 0.7);
    assert_eq!(sent["top_p"], 0.95);
}

#[test]
fn remote_tool_adapter_round_trip() {
    let (addr, server) = serve_json(r#"{"content":"looked it up remotely","success":true}"#, 1);
    let spec = ToolSpec::new(
        "lookup",
        "Remote lookup over the adapter endpoint.",
        vec![ParamSpec {
            name: "query".into(),
            kind: ParamType::String,
            required: true,
        }],
    );
    let mut registry = ToolRegistry::new();
    registry
        .register_tool(
            spec,
            Arc::new(RemoteTool {
                tool_name: "lookup".into(),
                endpoint: addr,
            }) as Arc<dyn Tool>,
        )
        .unwrap();
    let result = registry
        .invoke(&ToolCallRecord::from_body("lookup", "the thing"), 0)
        .unwrap();
    assert!(result.success);
    assert_eq!(result.content, "looked it up remotely");

    let requests = server.join().unwrap();
    let body_start = requests[0].find("\r\n\r\n").unwrap() + 4;
    let sent: serde_json::Value = serde_json::from_str(&requests[0][body_start..]).unwrap();
    assert_eq!(sent["tool"], "lookup");
    assert_eq!(sent["arguments"]["query"], "the thing");
}
