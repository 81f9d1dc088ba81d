//! One WebSocket client: hello, then the broadcast stream, with control
//! frames answered in between.

use crate::hub::{HubEvent, StreamHub};
use axum::extract::ws::{close_code, CloseFrame, Message, Utf8Bytes, WebSocket};
use futures::{SinkExt, StreamExt};
use notestream_protocol::{ControlMessage, ErrorBody, ErrorCode, ServerFrame};
use std::sync::Arc;
use tokio::sync::broadcast::error::RecvError;

fn text(frame: &ServerFrame) -> Message {
    Message::Text(Utf8Bytes::from(frame.to_json()))
}

fn close(code: u16, reason: &'static str) -> Message {
    Message::Close(Some(CloseFrame {
        code,
        reason: Utf8Bytes::from_static(reason),
    }))
}

pub async fn run(socket: WebSocket, hub: Arc<StreamHub>) {
    // subscribe before the hello so nothing after it is missed
    let mut events = hub.subscribe();
    let mut closed = hub.closed();
    if *closed.borrow_and_update() {
        return;
    }
    let (mut tx, mut rx) = socket.split();
    if tx.send(text(&hub.hello())).await.is_err() {
        return;
    }
    tracing::info!("client connected");
    loop {
        tokio::select! {
            ev = events.recv() => {
                let result = match ev {
                    Ok(HubEvent::Chunk(chunk)) => {
                        let mut frames: Vec<Result<Message, axum::Error>> = Vec::with_capacity(chunk.notes.len() + 1);
                        frames.push(Ok(text(&ServerFrame::chunk(chunk.index, chunk.notes.len()))));
                        frames.extend(chunk.notes.iter().map(|n| Ok(text(&ServerFrame::note(*n)))));
                        tx.send_all(&mut futures::stream::iter(frames)).await
                    }
                    Ok(HubEvent::Failed(e)) => tx.send(text(&ServerFrame::error(e))).await,
                    Err(RecvError::Lagged(missed)) => {
                        tracing::warn!(missed, "dropping a client that fell behind");
                        let _ = tx.send(close(close_code::POLICY, "lagged")).await;
                        break;
                    }
                    Err(RecvError::Closed) => {
                        let _ = tx.send(close(close_code::AWAY, "stream ended")).await;
                        break;
                    }
                };
                if result.is_err() {
                    break;
                }
            }
            msg = rx.next() => {
                let reply = match msg {
                    Some(Ok(Message::Text(t))) => match ControlMessage::parse(t.as_str()) {
                        Ok(m) => match hub.control(m).await {
                            Ok(at) => ServerFrame::ack(at),
                            Err(e) => ServerFrame::error(e),
                        },
                        Err(e) => ServerFrame::error(e),
                    },
                    Some(Ok(Message::Binary(_))) => ServerFrame::error(ErrorBody::new(
                        ErrorCode::BadFrame,
                        "binary frames are not supported; send JSON text",
                    )),
                    Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                };
                if tx.send(text(&reply)).await.is_err() {
                    break;
                }
            }
            _ = closed.changed() => {
                let _ = tx.send(close(close_code::AWAY, "server shutting down")).await;
                break;
            }
        }
    }
    tracing::info!("client disconnected");
}
